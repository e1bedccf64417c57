//! The double-scenario click graph and its unified form where every edge
//! carries an intent source.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{InteractionRecord, Scenario, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("unknown {kind} {id} (graph has {count})")]
    UnknownNode {
        kind: &'static str,
        id: usize,
        count: usize,
    },
    #[error("record {record}: {kind} {id} outside 0..{count}")]
    OutOfRange {
        record: usize,
        kind: &'static str,
        id: usize,
        count: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    User(usize),
    Item(usize),
}

/// One interaction. Parallel edges between the same pair are kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub user: usize,
    pub item: usize,
    pub scenario: Scenario,
    /// Query term ids; empty on Rec edges.
    pub terms: Vec<u32>,
    /// Index of the source record in the training split.
    pub record: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DoubleScenarioGraph {
    n_users: usize,
    n_items: usize,
    edges: Vec<Edge>,
    user_adj: Vec<Vec<usize>>,
    item_adj: Vec<Vec<usize>>,
}

impl DoubleScenarioGraph {
    /// One edge per training record, adjacency in record order.
    pub fn build(
        train: &[InteractionRecord],
        n_users: usize,
        n_items: usize,
    ) -> Result<Self, GraphError> {
        let mut user_adj = vec![Vec::new(); n_users];
        let mut item_adj = vec![Vec::new(); n_items];
        let mut edges = Vec::with_capacity(train.len());
        for (k, r) in train.iter().enumerate() {
            if r.user >= n_users {
                return Err(GraphError::OutOfRange {
                    record: k,
                    kind: "user",
                    id: r.user,
                    count: n_users,
                });
            }
            if r.item >= n_items {
                return Err(GraphError::OutOfRange {
                    record: k,
                    kind: "item",
                    id: r.item,
                    count: n_items,
                });
            }
            user_adj[r.user].push(edges.len());
            item_adj[r.item].push(edges.len());
            edges.push(Edge {
                user: r.user,
                item: r.item,
                scenario: r.scenario,
                terms: r.terms.clone(),
                record: k,
            });
        }
        Ok(Self {
            n_users,
            n_items,
            edges,
            user_adj,
            item_adj,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edge indices incident to `node`, in record order.
    pub fn neighbors(&self, node: Node) -> Result<&[usize], GraphError> {
        match node {
            Node::User(u) => self.user_adj.get(u).map(Vec::as_slice).ok_or(GraphError::UnknownNode {
                kind: "user",
                id: u,
                count: self.n_users,
            }),
            Node::Item(i) => self.item_adj.get(i).map(Vec::as_slice).ok_or(GraphError::UnknownNode {
                kind: "item",
                id: i,
                count: self.n_items,
            }),
        }
    }

    pub fn degree(&self, node: Node) -> Result<usize, GraphError> {
        self.neighbors(node).map(<[usize]>::len)
    }

    /// Debug dump: `u<TAB>i<TAB>S|R<TAB>terms` per edge.
    pub fn dump(&self, path: &Path, vocab: &Vocabulary) -> Result<(), GraphError> {
        let mut out = String::new();
        for e in &self.edges {
            let terms: Vec<&str> = e.terms.iter().map(|&t| vocab.term(t).unwrap_or("<unk>")).collect();
            let _ = writeln!(out, "{}\t{}\t{}\t{}", e.user, e.item, e.scenario.tag(), terms.join(" "));
        }
        fs::write(path, out).map_err(|source| GraphError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Where an edge's intent vector comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IntentSource {
    /// Pooled embedding of the real query terms.
    RealQuery(Vec<u32>),
    /// Generator output for the (user, item) pair, recomputed every forward
    /// pass from the current parameters.
    Generated { user: usize, item: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedGraph {
    base: DoubleScenarioGraph,
    sources: Vec<IntentSource>,
    search_edges: Vec<usize>,
    rec_edges: Vec<usize>,
}

impl UnifiedGraph {
    /// Attaches an intent source to every edge.
    pub fn unify(base: DoubleScenarioGraph) -> Self {
        let mut sources = Vec::with_capacity(base.num_edges());
        let mut search_edges = Vec::new();
        let mut rec_edges = Vec::new();
        for (k, e) in base.edges().iter().enumerate() {
            match e.scenario {
                Scenario::Search => {
                    search_edges.push(k);
                    sources.push(IntentSource::RealQuery(e.terms.clone()));
                }
                Scenario::Rec => {
                    rec_edges.push(k);
                    sources.push(IntentSource::Generated {
                        user: e.user,
                        item: e.item,
                    });
                }
            }
        }
        Self {
            base,
            sources,
            search_edges,
            rec_edges,
        }
    }

    pub fn base(&self) -> &DoubleScenarioGraph {
        &self.base
    }

    pub fn sources(&self) -> &[IntentSource] {
        &self.sources
    }

    pub fn search_edges(&self) -> &[usize] {
        &self.search_edges
    }

    pub fn rec_edges(&self) -> &[usize] {
        &self.rec_edges
    }

    pub fn edges(&self) -> &[Edge] {
        self.base.edges()
    }

    pub fn neighbors(&self, node: Node) -> Result<&[usize], GraphError> {
        self.base.neighbors(node)
    }
}
