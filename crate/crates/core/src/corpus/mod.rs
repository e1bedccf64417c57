//! Dual-scenario interaction logs: records, vocabulary, history profiles,
//! chronological splits and the synthetic world generator.

mod history;
mod split;
mod synth;
mod tsv;
mod vocab;

pub use history::{HistoryProfiles, ITEM_HISTORY_LEN, USER_HISTORY_LEN};
pub use split::{chronological_split, Dated, Splits};
pub use synth::{synthesize_dataset, SyntheticWorld, WorldConfig};
pub use tsv::{
    format_raw_line, parse_interactions, parse_raw_line, read_raw_records, write_raw_records,
    write_records,
};
pub use vocab::{build_vocabulary, Vocabulary, MAX_VOCAB_SIZE, PAD, UNK};

use std::path::PathBuf;

/// Maximum number of terms of a query that the model consumes.
pub const QUERY_LEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    Search,
    Rec,
}

impl Scenario {
    pub fn tag(self) -> &'static str {
        match self {
            Scenario::Search => "S",
            Scenario::Rec => "R",
        }
    }
}

/// One click event with its query already mapped to term ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InteractionRecord {
    pub scenario: Scenario,
    pub user: usize,
    pub item: usize,
    pub day: u32,
    /// Empty iff `scenario` is `Rec`.
    pub terms: Vec<u32>,
}

impl InteractionRecord {
    pub fn is_search(&self) -> bool {
        self.scenario == Scenario::Search
    }

    /// The query truncated or PAD-filled to [`QUERY_LEN`] terms.
    pub fn padded_query(&self) -> [u32; QUERY_LEN] {
        let mut q = [PAD; QUERY_LEN];
        for (slot, &t) in q.iter_mut().zip(&self.terms) {
            *slot = t;
        }
        q
    }
}

/// A record as it appears on disk, with terms still as strings.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawRecord {
    pub scenario: Scenario,
    pub user: usize,
    pub item: usize,
    pub day: u32,
    pub terms: Vec<String>,
}

impl RawRecord {
    pub fn to_record(&self, vocab: &Vocabulary) -> InteractionRecord {
        InteractionRecord {
            scenario: self.scenario,
            user: self.user,
            item: self.item,
            day: self.day,
            terms: self.terms.iter().map(|t| vocab.id(t)).collect(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: Search record without query")]
    SearchWithoutQuery { path: PathBuf, line: usize },
    #[error("{path}:{line}: Rec record with a query")]
    RecWithQuery { path: PathBuf, line: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Checks the record invariants against registered id ranges.
pub fn validate_records(
    records: &[InteractionRecord],
    n_users: usize,
    n_items: usize,
    vocab_size: usize,
) -> Result<()> {
    for (k, r) in records.iter().enumerate() {
        let fail = |msg: String| {
            Err(CorpusError::Config(format!("record {k}: {msg}")))
        };
        if r.user >= n_users {
            return fail(format!("user {} outside 0..{n_users}", r.user));
        }
        if r.item >= n_items {
            return fail(format!("item {} outside 0..{n_items}", r.item));
        }
        match (r.scenario, r.terms.is_empty()) {
            (Scenario::Search, true) => return fail("Search record without query".into()),
            (Scenario::Rec, false) => return fail("Rec record with a query".into()),
            _ => {}
        }
        if let Some(&t) = r.terms.iter().find(|&&t| t as usize >= vocab_size) {
            return fail(format!("term id {t} outside vocabulary of {vocab_size}"));
        }
    }
    Ok(())
}
