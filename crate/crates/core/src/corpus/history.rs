use std::collections::HashMap;

use super::{InteractionRecord, Vocabulary, PAD, UNK};

pub const USER_HISTORY_LEN: usize = 3;
pub const ITEM_HISTORY_LEN: usize = 10;

/// Fixed-length historical query terms per user (`q_u`) and per item (`q_i`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryProfiles {
    pub user: Vec<[u32; USER_HISTORY_LEN]>,
    pub item: Vec<[u32; ITEM_HISTORY_LEN]>,
}

impl HistoryProfiles {
    /// Builds profiles from the training Search records.
    ///
    /// `q_u` holds the most recent distinct terms, newest first. `q_i` holds
    /// the most frequent terms of queries that led to a click on the item,
    /// ties broken by recency and then by term text. PAD and UNK are never
    /// stored; missing slots are PAD.
    pub fn assemble(
        train: &[InteractionRecord],
        n_users: usize,
        n_items: usize,
        vocab: &Vocabulary,
    ) -> Self {
        // chronological position: (day, index in input)
        let mut order: Vec<usize> = (0..train.len()).filter(|&k| train[k].is_search()).collect();
        order.sort_by_key(|&k| (train[k].day, k));

        let mut user = vec![[PAD; USER_HISTORY_LEN]; n_users];
        let mut filled = vec![0usize; n_users];
        for &k in order.iter().rev() {
            let r = &train[k];
            let (slots, n) = (&mut user[r.user], &mut filled[r.user]);
            for &t in &r.terms {
                if *n == USER_HISTORY_LEN {
                    break;
                }
                if t == PAD || t == UNK || slots[..*n].contains(&t) {
                    continue;
                }
                slots[*n] = t;
                *n += 1;
            }
        }

        // per item: term -> (count, last position)
        let mut stats: Vec<HashMap<u32, (usize, usize)>> = vec![HashMap::new(); n_items];
        for (pos, &k) in order.iter().enumerate() {
            let r = &train[k];
            for &t in &r.terms {
                if t == PAD || t == UNK {
                    continue;
                }
                let e = stats[r.item].entry(t).or_insert((0, 0));
                e.0 += 1;
                e.1 = pos;
            }
        }
        let item = stats
            .into_iter()
            .map(|m| {
                let mut ranked: Vec<(u32, usize, usize)> =
                    m.into_iter().map(|(t, (c, last))| (t, c, last)).collect();
                ranked.sort_by(|a, b| {
                    b.1.cmp(&a.1)
                        .then(b.2.cmp(&a.2))
                        .then_with(|| vocab.term(a.0).cmp(&vocab.term(b.0)))
                });
                let mut slots = [PAD; ITEM_HISTORY_LEN];
                for (s, (t, _, _)) in slots.iter_mut().zip(ranked) {
                    *s = t;
                }
                slots
            })
            .collect();

        Self { user, item }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Scenario;

    fn rec(user: usize, item: usize, day: u32, terms: &[u32]) -> InteractionRecord {
        InteractionRecord {
            scenario: if terms.is_empty() { Scenario::Rec } else { Scenario::Search },
            user,
            item,
            day,
            terms: terms.to_vec(),
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_terms(["noodle", "pizza", "soup", "rice"])
    }

    const NOODLE: u32 = 2;
    const PIZZA: u32 = 3;
    const SOUP: u32 = 4;
    const RICE: u32 = 5;

    #[test]
    fn user_profile_is_recency_ordered() {
        let train = vec![rec(0, 0, 0, &[NOODLE]), rec(0, 1, 1, &[PIZZA])];
        let h = HistoryProfiles::assemble(&train, 2, 2, &vocab());
        assert_eq!(h.user[0], [PIZZA, NOODLE, PAD]);
        assert_eq!(h.user[1], [PAD; 3]);
    }

    #[test]
    fn user_profile_distinct_and_capped() {
        let train = vec![
            rec(0, 0, 0, &[RICE]),
            rec(0, 0, 1, &[NOODLE, SOUP]),
            rec(0, 0, 1, &[NOODLE]),
            rec(0, 0, 2, &[PIZZA, UNK]),
        ];
        let h = HistoryProfiles::assemble(&train, 1, 1, &vocab());
        assert_eq!(h.user[0], [PIZZA, NOODLE, SOUP]);
    }

    #[test]
    fn item_profile_is_frequency_ordered() {
        let train = vec![
            rec(0, 0, 0, &[SOUP]),
            rec(1, 0, 0, &[NOODLE]),
            rec(2, 0, 1, &[NOODLE]),
            rec(3, 0, 1, &[NOODLE]),
            rec(3, 1, 1, &[RICE]),
        ];
        let h = HistoryProfiles::assemble(&train, 4, 3, &vocab());
        assert_eq!(&h.item[0][..3], &[NOODLE, SOUP, PAD]);
        assert_eq!(h.item[1][0], RICE);
        assert_eq!(h.item[2], [PAD; 10]);
    }

    #[test]
    fn item_ties_by_recency_then_text() {
        let train = vec![
            rec(0, 0, 0, &[SOUP]),
            rec(0, 0, 1, &[RICE]),
            rec(0, 0, 1, &[PIZZA, NOODLE]),
        ];
        let h = HistoryProfiles::assemble(&train, 1, 1, &vocab());
        // pizza and noodle share the latest position; "noodle" < "pizza"
        assert_eq!(&h.item[0][..4], &[NOODLE, PIZZA, RICE, SOUP]);
    }

    #[test]
    fn rec_records_ignored() {
        let train = vec![rec(0, 0, 0, &[])];
        let h = HistoryProfiles::assemble(&train, 1, 1, &vocab());
        assert_eq!(h.user[0], [PAD; 3]);
        assert_eq!(h.item[0], [PAD; 10]);
    }
}
