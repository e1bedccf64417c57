//! Dual-intent translation propagation over the unified graph.
//!
//! Item messages are `e_u + intent` and user messages are `e_i - intent`,
//! so that after training `inherent + demand ≈ item` holds along edges.
//! Each layer takes the mean over incident edges; a node without edges
//! keeps its previous-layer vector.

use crate::graph::UnifiedGraph;
use crate::tensor::{Graph, Matrix, Result, Var};

pub const DEFAULT_DEPTH: usize = 2;

/// Layer combination weights `1/(l+1)` for `l = 0..=depth`.
pub fn layer_weights(depth: usize) -> Vec<f64> {
    (0..=depth).map(|l| 1.0 / (l as f64 + 1.0)).collect()
}

/// Endpoint lists of every edge, in edge order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub n_users: usize,
    pub n_items: usize,
    pub edge_users: Vec<usize>,
    pub edge_items: Vec<usize>,
}

impl Topology {
    pub fn new(n_users: usize, n_items: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (edge_users, edge_items) = edges.into_iter().unzip();
        Self {
            n_users,
            n_items,
            edge_users,
            edge_items,
        }
    }

    pub fn of(graph: &UnifiedGraph) -> Self {
        Self::new(
            graph.base().n_users(),
            graph.base().n_items(),
            graph.edges().iter().map(|e| (e.user, e.item)),
        )
    }

    pub fn num_edges(&self) -> usize {
        self.edge_users.len()
    }
}

/// Per-layer user and item matrices; index 0 is the raw embedding table.
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub users: Vec<Var>,
    pub items: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct CombinedReprs {
    pub users: Var,
    pub items: Var,
}

/// Computes layer `l` from layer `l - 1`.
///
/// With `intents = None` the messages are the plain neighbor embeddings
/// (mean-pooling propagation without translation).
pub fn propagate_layer(
    g: &mut Graph,
    topo: &Topology,
    prev_users: Var,
    prev_items: Var,
    intents: Option<Var>,
) -> Result<(Var, Var)> {
    let from_users = g.gather_rows(prev_users, topo.edge_users.clone())?;
    let from_items = g.gather_rows(prev_items, topo.edge_items.clone())?;
    let (item_msgs, user_msgs) = match intents {
        Some(q) => (g.add(from_users, q)?, g.sub(from_items, q)?),
        None => (from_users, from_items),
    };
    let items = g.scatter_mean(item_msgs, topo.edge_items.clone(), prev_items)?;
    let users = g.scatter_mean(user_msgs, topo.edge_users.clone(), prev_users)?;
    Ok((users, items))
}

pub fn propagate(
    g: &mut Graph,
    topo: &Topology,
    users0: Var,
    items0: Var,
    intents: Option<Var>,
    depth: usize,
) -> Result<LayerStack> {
    let mut stack = LayerStack {
        users: vec![users0],
        items: vec![items0],
    };
    for l in 1..=depth {
        let (u, i) = propagate_layer(g, topo, stack.users[l - 1], stack.items[l - 1], intents)?;
        stack.users.push(u);
        stack.items.push(i);
    }
    Ok(stack)
}

fn weighted_sum(g: &mut Graph, layers: &[Var]) -> Result<Var> {
    let weights = layer_weights(layers.len() - 1);
    let mut acc = g.scale(layers[0], weights[0]);
    for (&layer, &w) in layers.iter().zip(&weights).skip(1) {
        let scaled = g.scale(layer, w);
        acc = g.add(acc, scaled)?;
    }
    Ok(acc)
}

pub fn combine_layers(g: &mut Graph, stack: &LayerStack) -> Result<CombinedReprs> {
    Ok(CombinedReprs {
        users: weighted_sum(g, &stack.users)?,
        items: weighted_sum(g, &stack.items)?,
    })
}

/// Mean over triples of `-ln σ(‖t - e_{i'}‖² - ‖t - e_i‖²)` with
/// `t = e_u* + intent`. `intents` holds one row per triple.
pub fn contrastive_loss(
    g: &mut Graph,
    reprs: CombinedReprs,
    intents: Var,
    users: &[usize],
    positives: &[usize],
    negatives: &[usize],
) -> Result<Var> {
    if users.is_empty() {
        log::warn!("contrastive loss over an empty triple set");
        return Ok(g.constant(Matrix::zeros((1, 1))));
    }
    let eu = g.gather_rows(reprs.users, users.to_vec())?;
    let translated = g.add(eu, intents)?;
    let pos = g.gather_rows(reprs.items, positives.to_vec())?;
    let neg = g.gather_rows(reprs.items, negatives.to_vec())?;
    let dpos = g.sub(translated, pos)?;
    let dpos = g.square(dpos);
    let dpos = g.row_sum(dpos);
    let dneg = g.sub(translated, neg)?;
    let dneg = g.square(dneg);
    let dneg = g.row_sum(dneg);
    let gap = g.sub(dneg, dpos)?;
    let loss = g.neg_log_sigmoid(gap);
    g.mean(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn weights_for_depth_two() {
        let w = layer_weights(2);
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], 0.5);
        assert!((w[2] - 1.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn single_edge_translation_identity() {
        let topo = Topology::new(1, 1, [(0, 0)]);
        let mut g = Graph::new();
        let u0 = g.constant(array![[0.3, -1.0]]);
        let i0 = g.constant(array![[2.0, 0.5]]);
        let q = g.constant(array![[0.7, 0.1]]);
        let (u1, i1) = propagate_layer(&mut g, &topo, u0, i0, Some(q)).unwrap();
        // e_i^1 = e_u^0 + q and e_u^1 = e_i^0 - q
        assert_eq!(g.value(i1), &(g.value(u0) + g.value(q)));
        assert_eq!(g.value(u1), &(g.value(i0) - g.value(q)));
    }

    #[test]
    fn isolated_nodes_keep_layer_zero() {
        let topo = Topology::new(2, 2, [(0, 0)]);
        let mut g = Graph::new();
        let u0 = g.constant(array![[1.0], [5.0]]);
        let i0 = g.constant(array![[2.0], [7.0]]);
        let q = g.constant(array![[0.5]]);
        let stack = propagate(&mut g, &topo, u0, i0, Some(q), 2).unwrap();
        for l in 0..=2 {
            assert_eq!(g.value(stack.users[l])[[1, 0]], 5.0);
            assert_eq!(g.value(stack.items[l])[[1, 0]], 7.0);
        }
        let c = combine_layers(&mut g, &stack).unwrap();
        assert!((g.value(c.users)[[1, 0]] - 5.0 * 11.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn combine_depth_zero_is_identity() {
        let mut g = Graph::new();
        let u = g.constant(array![[1.5, 2.0]]);
        let i = g.constant(array![[3.0, 4.0]]);
        let stack = LayerStack {
            users: vec![u],
            items: vec![i],
        };
        let c = combine_layers(&mut g, &stack).unwrap();
        assert_eq!(g.value(c.users), g.value(u));
        assert_eq!(g.value(c.items), g.value(i));
    }

    #[test]
    fn combine_equal_layers() {
        let mut g = Graph::new();
        let v = g.constant(array![[6.0, -12.0]]);
        let stack = LayerStack {
            users: vec![v, v, v],
            items: vec![v, v, v],
        };
        let c = combine_layers(&mut g, &stack).unwrap();
        let out = g.value(c.users);
        assert!((out[[0, 0]] - 11.0).abs() < 1e-12);
        assert!((out[[0, 1]] + 22.0).abs() < 1e-12);
    }

    #[test]
    fn zero_intents_equal_plain_mean() {
        let topo = Topology::new(3, 2, [(0, 0), (1, 0), (1, 1), (2, 1)]);
        let mut g = Graph::new();
        let u0 = g.constant(array![[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]]);
        let i0 = g.constant(array![[-1.0, 1.0], [0.5, 0.5]]);
        let zero = g.constant(Matrix::zeros((4, 2)));
        let a = propagate(&mut g, &topo, u0, i0, Some(zero), 2).unwrap();
        let b = propagate(&mut g, &topo, u0, i0, None, 2).unwrap();
        for l in 0..=2 {
            assert_eq!(g.value(a.users[l]), g.value(b.users[l]));
            assert_eq!(g.value(a.items[l]), g.value(b.items[l]));
        }
    }

    fn cl_with_gap(gap_sq: f64) -> f64 {
        // user at origin, zero intent, positive at distance 0, negative at sqrt(gap)
        let mut g = Graph::new();
        let users = g.constant(array![[0.0, 0.0]]);
        let items = g.constant(array![[0.0, 0.0], [gap_sq.sqrt(), 0.0]]);
        let q = g.constant(array![[0.0, 0.0]]);
        let reprs = CombinedReprs { users, items };
        let l = contrastive_loss(&mut g, reprs, q, &[0], &[0], &[1]).unwrap();
        g.scalar(l)
    }

    #[test]
    fn contrastive_closed_forms() {
        assert!((cl_with_gap(0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cl_with_gap(1.0) - 0.313_261_687_5).abs() < 1e-9);
        let mut last = f64::INFINITY;
        for gap in [0.5, 2.0, 8.0, 32.0, 128.0] {
            let l = cl_with_gap(gap);
            assert!(l > 0.0 && l < last);
            last = l;
        }
    }
}
