use crate::corpus::{HistoryProfiles, InteractionRecord, Vocabulary, QUERY_LEN};
use crate::graph::{DoubleScenarioGraph, GraphError, UnifiedGraph};
use crate::propagation::Topology;

/// Everything derived from the training split that a forward pass needs.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<InteractionRecord>,
    pub graph: UnifiedGraph,
    pub topology: Topology,
    pub profiles: HistoryProfiles,
    /// Padded query terms of every Search edge, `QUERY_LEN` per edge.
    pub search_queries: Vec<u32>,
    /// Distinct (user, item) pairs among Rec edges, as parallel lists.
    pub rec_users: Vec<usize>,
    pub rec_items: Vec<usize>,
    /// Pair index of each Rec edge, in Rec edge order.
    pub rec_pair: Vec<usize>,
    /// Row of each edge in `[search edges; rec edges]`.
    pub edge_slot: Vec<usize>,
    /// Sorted distinct items each user interacted with in training.
    pub train_items: Vec<Vec<usize>>,
}

impl TrainContext {
    pub fn new(
        train: Vec<InteractionRecord>,
        n_users: usize,
        n_items: usize,
        vocab: &Vocabulary,
    ) -> Result<Self, GraphError> {
        let base = DoubleScenarioGraph::build(&train, n_users, n_items)?;
        let graph = UnifiedGraph::unify(base);
        let topology = Topology::of(&graph);
        let profiles = HistoryProfiles::assemble(&train, n_users, n_items, vocab);

        let edges = graph.edges();
        let mut search_queries = Vec::with_capacity(graph.search_edges().len() * QUERY_LEN);
        let mut edge_slot = vec![0; edges.len()];
        for (slot, &e) in graph.search_edges().iter().enumerate() {
            search_queries.extend_from_slice(&train[edges[e].record].padded_query());
            edge_slot[e] = slot;
        }
        let offset = graph.search_edges().len();
        let mut pairs: Vec<(usize, usize)> = graph.rec_edges().iter().map(|&e| (edges[e].user, edges[e].item)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        let mut rec_pair = Vec::with_capacity(graph.rec_edges().len());
        for (slot, &e) in graph.rec_edges().iter().enumerate() {
            let key = (edges[e].user, edges[e].item);
            rec_pair.push(pairs.binary_search(&key).expect("pair collected above"));
            edge_slot[e] = offset + slot;
        }
        let (rec_users, rec_items) = pairs.into_iter().unzip();

        let mut train_items = vec![Vec::new(); n_users];
        for r in &train {
            train_items[r.user].push(r.item);
        }
        for items in &mut train_items {
            items.sort_unstable();
            items.dedup();
        }

        Ok(Self {
            n_users,
            n_items,
            train,
            graph,
            topology,
            profiles,
            search_queries,
            rec_users,
            rec_items,
            rec_pair,
            edge_slot,
            train_items,
        })
    }
}
