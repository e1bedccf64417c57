use super::{CorpusError, InteractionRecord, RawRecord, Result};

/// Anything stamped with a day index.
pub trait Dated {
    fn day(&self) -> u32;
}

impl Dated for InteractionRecord {
    fn day(&self) -> u32 {
        self.day
    }
}

impl Dated for RawRecord {
    fn day(&self) -> u32 {
        self.day
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<R = InteractionRecord> {
    pub train: Vec<R>,
    pub valid: Vec<R>,
    pub test: Vec<R>,
}

impl<R> Default for Splits<R> {
    fn default() -> Self {
        Self {
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        }
    }
}

/// Partitions records by day: the first `train_days` day indices go to
/// training, the next `valid_days` to validation and the last `test_days`
/// to testing. Record order within each split is preserved.
pub fn chronological_split<R: Dated + Clone>(
    records: &[R],
    train_days: u32,
    valid_days: u32,
    test_days: u32,
) -> Result<Splits<R>> {
    let total = train_days + valid_days + test_days;
    let span = records.iter().map(|r| r.day() + 1).max().unwrap_or(0);
    if span < total {
        return Err(CorpusError::Config(format!(
            "records span {span} days but the split needs {total}"
        )));
    }
    if span > total {
        return Err(CorpusError::Config(format!(
            "records span {span} days, more than the {total} covered by the split"
        )));
    }
    let mut out = Splits::default();
    for r in records {
        let bucket = if r.day() < train_days {
            &mut out.train
        } else if r.day() < train_days + valid_days {
            &mut out.valid
        } else {
            &mut out.test
        };
        bucket.push(r.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Scenario;
    use proptest::prelude::*;

    fn at(day: u32) -> InteractionRecord {
        InteractionRecord {
            scenario: Scenario::Rec,
            user: 0,
            item: 0,
            day,
            terms: vec![],
        }
    }

    #[test]
    fn default_protocol_days() {
        let recs: Vec<_> = (0..8).map(at).collect();
        let s = chronological_split(&recs, 6, 1, 1).unwrap();
        assert_eq!(s.train.len(), 6);
        assert!(s.train.contains(&at(0)));
        assert_eq!(s.valid, vec![at(6)]);
        assert_eq!(s.test, vec![at(7)]);
    }

    #[test]
    fn too_few_days() {
        let recs: Vec<_> = (0..5).map(at).collect();
        assert!(matches!(chronological_split(&recs, 6, 1, 1), Err(CorpusError::Config(_))));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(days in prop::collection::vec(0u32..8, 1..200)) {
            let mut recs: Vec<_> = days.iter().map(|&d| at(d)).collect();
            recs.push(at(7));
            let s = chronological_split(&recs, 6, 1, 1).unwrap();
            prop_assert_eq!(s.train.len() + s.valid.len() + s.test.len(), recs.len());
            prop_assert!(s.train.iter().all(|r| r.day < 6));
            prop_assert!(s.valid.iter().all(|r| r.day == 6));
            prop_assert!(s.test.iter().all(|r| r.day == 7));
        }
    }
}
