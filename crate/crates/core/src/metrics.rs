//! Leave-one-out ranking evaluation: each held-out click is ranked against
//! sampled negatives and scored with Hit@K, NDCG@K, MRR, Avg.C and AUC.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{InteractionRecord, Scenario, QUERY_LEN};
use crate::model::Scorer;
use crate::tensor::TensorError;

pub const NUM_NEGATIVES: usize = 99;
pub const NUM_CANDIDATES: usize = NUM_NEGATIVES + 1;
pub const CUTOFF: usize = 5;
/// Trials scored together in one forward pass.
const CHUNK_TRIALS: usize = 64;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("rank {rank} outside [1, {max}]")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("no ranks to average")]
    Empty,
    #[error("scorer returned {got} scores for {expected} candidates")]
    ScoreCount { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check(rank: usize, max: usize) -> Result<()> {
    if rank == 0 || rank > max {
        return Err(MetricError::RankOutOfRange { rank, max });
    }
    Ok(())
}

pub fn hit_at_k(rank: usize, k: usize) -> Result<f64> {
    check(rank, NUM_CANDIDATES)?;
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

pub fn ndcg_at_k(rank: usize, k: usize) -> Result<f64> {
    check(rank, NUM_CANDIDATES)?;
    Ok(if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
}

pub fn mrr(rank: usize) -> Result<f64> {
    check(rank, NUM_CANDIDATES)?;
    Ok(1.0 / rank as f64)
}

/// Fraction of the `n_neg` negatives ranked below the positive.
pub fn auc(rank: usize, n_neg: usize) -> Result<f64> {
    check(rank, n_neg + 1)?;
    if n_neg == 0 {
        return Ok(1.0);
    }
    Ok((n_neg + 1 - rank) as f64 / n_neg as f64)
}

pub fn avg_c(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(MetricError::Empty);
    }
    for &r in ranks {
        check(r, NUM_CANDIDATES)?;
    }
    Ok(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
}

/// One held-out interaction with its candidate list; the positive is first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedTrial {
    pub record_idx: usize,
    pub scenario: Scenario,
    pub user: usize,
    pub query: [u32; QUERY_LEN],
    pub candidates: Vec<usize>,
    /// Negatives missing because the user had too few unseen items.
    pub shortfall: usize,
}

impl RankedTrial {
    pub fn positive(&self) -> usize {
        self.candidates[0]
    }

    pub fn num_negatives(&self) -> usize {
        self.candidates.len() - 1
    }
}

/// Sorted distinct items per user over every given split.
pub fn interacted_items(n_users: usize, splits: &[&[InteractionRecord]]) -> Vec<Vec<usize>> {
    let mut seen = vec![Vec::new(); n_users];
    for split in splits {
        for r in split.iter() {
            seen[r.user].push(r.item);
        }
    }
    for s in &mut seen {
        s.sort_unstable();
        s.dedup();
    }
    seen
}

/// Samples 99 negatives per record from items the user never touched.
pub fn build_trials(
    records: &[InteractionRecord],
    interacted: &[Vec<usize>],
    n_items: usize,
    seed: u64,
) -> Vec<RankedTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut short = 0usize;
    let trials: Vec<RankedTrial> = records
        .iter()
        .enumerate()
        .map(|(idx, r)| {
            let seen = &interacted[r.user];
            let eligible: Vec<usize> = (0..n_items).filter(|i| seen.binary_search(i).is_err()).collect();
            let take = eligible.len().min(NUM_NEGATIVES);
            let mut candidates = Vec::with_capacity(take + 1);
            candidates.push(r.item);
            candidates.extend(index::sample(&mut rng, eligible.len(), take).iter().map(|k| eligible[k]));
            if take < NUM_NEGATIVES {
                short += 1;
            }
            RankedTrial {
                record_idx: idx,
                scenario: r.scenario,
                user: r.user,
                query: r.padded_query(),
                candidates,
                shortfall: NUM_NEGATIVES - take,
            }
        })
        .collect();
    if short > 0 {
        log::warn!("{short} trials have fewer than {NUM_NEGATIVES} negatives");
    }
    trials
}

/// 1-indexed rank of `candidates[0]`; equal scores go to the lower item id.
pub fn rank_of(candidates: &[usize], scores: &[f64]) -> usize {
    let (pos_item, pos_score) = (candidates[0], scores[0]);
    1 + candidates[1..]
        .iter()
        .zip(&scores[1..])
        .filter(|&(&item, &s)| s > pos_score || (s == pos_score && item < pos_item))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskMetrics {
    pub trials: usize,
    pub hit: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub avg_c: f64,
    pub auc: f64,
    pub short_trials: usize,
}

impl TaskMetrics {
    /// Aggregates `(rank, n_neg)` pairs; `None` for an empty task.
    pub fn from_ranks(ranks: &[(usize, usize)]) -> Result<Option<Self>> {
        if ranks.is_empty() {
            return Ok(None);
        }
        let n = ranks.len() as f64;
        let (mut hit, mut ndcg, mut rr, mut a) = (0.0, 0.0, 0.0, 0.0);
        for &(r, n_neg) in ranks {
            hit += hit_at_k(r, CUTOFF)?;
            ndcg += ndcg_at_k(r, CUTOFF)?;
            rr += mrr(r)?;
            a += auc(r, n_neg)?;
        }
        let plain: Vec<usize> = ranks.iter().map(|&(r, _)| r).collect();
        Ok(Some(Self {
            trials: ranks.len(),
            hit: hit / n,
            ndcg: ndcg / n,
            mrr: rr / n,
            avg_c: avg_c(&plain)?,
            auc: a / n,
            short_trials: ranks.iter().filter(|&&(_, k)| k < NUM_NEGATIVES).count(),
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub record_idx: usize,
    pub scenario: Scenario,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub search: Option<TaskMetrics>,
    pub rec: Option<TaskMetrics>,
    pub outcomes: Vec<TrialOutcome>,
}

impl EvalReport {
    pub fn from_outcomes(outcomes: Vec<TrialOutcome>, trials: &[RankedTrial]) -> Result<Self> {
        let collect = |s: Scenario| -> Vec<(usize, usize)> {
            outcomes
                .iter()
                .zip(trials)
                .filter(|(o, _)| o.scenario == s)
                .map(|(o, t)| (o.rank, t.num_negatives()))
                .collect()
        };
        Ok(Self {
            search: TaskMetrics::from_ranks(&collect(Scenario::Search))?,
            rec: TaskMetrics::from_ranks(&collect(Scenario::Rec))?,
            outcomes,
        })
    }

    pub fn task(&self, scenario: Scenario) -> Option<&TaskMetrics> {
        match scenario {
            Scenario::Search => self.search.as_ref(),
            Scenario::Rec => self.rec.as_ref(),
        }
    }

    /// Mean NDCG@5 over the tasks present.
    pub fn mean_ndcg(&self) -> f64 {
        let v: Vec<f64> = [self.search, self.rec].iter().flatten().map(|m| m.ndcg).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("task\ttrials\thit@5\tndcg@5\tmrr\tavg_c\tauc\n");
        for (name, m) in [("search", &self.search), ("rec", &self.rec)] {
            match m {
                Some(m) => {
                    let _ = writeln!(
                        out,
                        "{name}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.6}",
                        m.trials, m.hit, m.ndcg, m.mrr, m.avg_c, m.auc
                    );
                }
                None => {
                    let _ = writeln!(out, "# {name}: no trials, task omitted");
                }
            }
        }
        for (name, m) in [("search", &self.search), ("rec", &self.rec)] {
            if let Some(m) = m.filter(|m| m.short_trials > 0) {
                let _ = writeln!(out, "# {name}: {} trials with fewer than {NUM_NEGATIVES} negatives", m.short_trials);
            }
        }
        out
    }

    pub fn ranks_tsv(&self) -> String {
        let mut out = String::from("record_idx\trank\n");
        for o in &self.outcomes {
            let _ = writeln!(out, "{}\t{}", o.record_idx, o.rank);
        }
        out
    }

    /// Writes `<stem>.txt` and `<stem>.ranks.tsv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let write = |name: String, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|source| MetricError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        write(format!("{stem}.txt"), self.to_text())?;
        write(format!("{stem}.ranks.tsv"), self.ranks_tsv())
    }
}

/// Ranks every trial with an arbitrary scoring function.
///
/// `score(scenario, users, items, queries)` returns one score per row;
/// `queries` carries `QUERY_LEN` ids per row.
pub fn evaluate_with<F, E>(trials: &[RankedTrial], mut score: F) -> Result<EvalReport>
where
    F: FnMut(Scenario, &[usize], &[usize], &[u32]) -> std::result::Result<Vec<f64>, E>,
    MetricError: From<E>,
{
    let mut outcomes: Vec<Option<TrialOutcome>> = vec![None; trials.len()];
    for scenario in [Scenario::Search, Scenario::Rec] {
        let idx: Vec<usize> = (0..trials.len()).filter(|&t| trials[t].scenario == scenario).collect();
        for chunk in idx.chunks(CHUNK_TRIALS) {
            let (mut users, mut items, mut queries) = (Vec::new(), Vec::new(), Vec::new());
            for &t in chunk {
                let trial = &trials[t];
                for &c in &trial.candidates {
                    users.push(trial.user);
                    items.push(c);
                    queries.extend_from_slice(&trial.query);
                }
            }
            let scores = score(scenario, &users, &items, &queries)?;
            if scores.len() != items.len() {
                return Err(MetricError::ScoreCount {
                    expected: items.len(),
                    got: scores.len(),
                });
            }
            let mut at = 0;
            for &t in chunk {
                let trial = &trials[t];
                let n = trial.candidates.len();
                let rank = rank_of(&trial.candidates, &scores[at..at + n]);
                at += n;
                outcomes[t] = Some(TrialOutcome {
                    record_idx: trial.record_idx,
                    scenario,
                    rank,
                });
            }
        }
    }
    let outcomes = outcomes.into_iter().map(|o| o.expect("every trial scored")).collect();
    EvalReport::from_outcomes(outcomes, trials)
}

/// Ranks every trial with the trained model.
pub fn evaluate(scorer: &Scorer<'_>, trials: &[RankedTrial]) -> Result<EvalReport> {
    evaluate_with(trials, |s, u, i, q| scorer.score(s, u, i, q))
}
