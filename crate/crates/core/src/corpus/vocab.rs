use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{CorpusError, RawRecord, Result, Scenario};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MAX_VOCAB_SIZE: usize = 5000;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Term to id map with reserved PAD (0) and UNK (1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_terms(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Builds a vocabulary whose non-reserved ids follow `terms` in order.
    pub fn from_terms<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(terms.into_iter().map(Into::into));
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { terms: all, index }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.len() <= 2
    }

    /// Id of `term`, or UNK when unseen.
    pub fn id(&self, term: &str) -> u32 {
        self.index.get(term).copied().unwrap_or(UNK)
    }

    pub fn term(&self, id: u32) -> Option<&str> {
        self.terms.get(id as usize).map(String::as_str)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, t) in self.terms.iter().enumerate().skip(2) {
            out.push_str(&format!("{t}\t{id}\n"));
        }
        fs::write(path, out).map_err(|e| CorpusError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let mut terms = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: &str| CorpusError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let (term, id) = line.split_once('\t').ok_or_else(|| parse_err("expected `term<TAB>id`"))?;
            let id: usize = id.parse().map_err(|_| parse_err("non-integer id"))?;
            if id != terms.len() + 2 {
                return Err(parse_err("ids must be consecutive from 2"));
            }
            terms.push(term.to_string());
        }
        Ok(Self::from_terms(terms))
    }
}

/// Keeps the `max_size - 2` most frequent terms of the Search records;
/// frequency ties are broken by lexicographic term order.
pub fn build_vocabulary(records: &[RawRecord], max_size: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records.iter().filter(|r| r.scenario == Scenario::Search) {
        for t in &r.terms {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size.saturating_sub(2));
    Vocabulary::from_terms(ranked.into_iter().map(|(t, _)| t))
}
