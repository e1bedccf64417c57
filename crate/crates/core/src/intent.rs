//! Query pooling, the user-aware gate over item history terms, the demand
//! intent generator and its search supervision loss.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{HistoryProfiles, ITEM_HISTORY_LEN, PAD, USER_HISTORY_LEN};
use crate::nn::{uniform, Mlp};
use crate::tensor::{Graph, Matrix, ParamId, ParamStore, Result, Var};

/// User, item and query-term embedding tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub users: ParamId,
    pub items: ParamId,
    pub terms: ParamId,
    pub dim: usize,
}

impl EmbeddingTables {
    /// Uniform in `±0.1/sqrt(dim)`; the PAD term row is zero and frozen.
    pub fn init(
        store: &mut ParamStore,
        n_users: usize,
        n_items: usize,
        vocab_size: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 0.1 / (dim as f64).sqrt();
        let users = store.add("emb.users", uniform(rng, n_users, dim, bound));
        let items = store.add("emb.items", uniform(rng, n_items, dim, bound));
        let terms = store.add("emb.terms", uniform(rng, vocab_size, dim, bound));
        store.freeze_rows(terms, &[PAD as usize]);
        Self {
            users,
            items,
            terms,
            dim,
        }
    }

    pub fn users(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = g.param(store, self.users);
        g.gather_rows(t, ids.to_vec())
    }

    pub fn items(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = g.param(store, self.items);
        g.gather_rows(t, ids.to_vec())
    }

    pub fn terms(&self, g: &mut Graph, store: &ParamStore, ids: &[u32]) -> Result<Var> {
        let t = g.param(store, self.terms);
        g.gather_rows(t, ids.iter().map(|&w| w as usize).collect())
    }

    /// Sum-pools consecutive groups of `group` term ids. PAD contributes
    /// nothing because its row is pinned at zero.
    pub fn pool(&self, g: &mut Graph, store: &ParamStore, terms: &[u32], group: usize) -> Result<Var> {
        if terms.is_empty() {
            return Ok(g.constant(Matrix::zeros((0, self.dim))));
        }
        let rows = self.terms(g, store, terms)?;
        g.group_sum(rows, group)
    }
}

/// Gate over item history terms followed by the generator MLP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntentGenerator {
    /// `(d * (1 + |q_u|)) x d`, applied as `K_g = [e_u, e_w1..e_w3] W`.
    pub gate: ParamId,
    pub mlp: Mlp,
}

/// Gate output for a batch of (user, item) pairs.
pub struct GateOutput {
    /// `n x |q_i|` weights; PAD positions are zero.
    pub weights: Var,
    /// `n x d` personalized item query representation.
    pub item_query: Var,
    /// `n x d` pooled user history query.
    pub user_query: Var,
    pub user_emb: Var,
}

impl IntentGenerator {
    /// `hidden` are the generator's hidden widths; input is `4d`, output `d`.
    pub fn init(store: &mut ParamStore, dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let fan_in = dim * (1 + USER_HISTORY_LEN);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let gate = store.add("gate.w", uniform(rng, fan_in, dim, bound));
        let mut widths = vec![4 * dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mlp = Mlp::init(store, "gen", &widths, rng);
        Self { gate, mlp }
    }

    pub fn gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tables: &EmbeddingTables,
        profiles: &HistoryProfiles,
        users: &[usize],
        items: &[usize],
    ) -> Result<GateOutput> {
        let n = users.len();
        let user_emb = tables.users(g, store, users)?;

        let mut key_parts = vec![user_emb];
        let mut pooled: Option<Var> = None;
        for k in 0..USER_HISTORY_LEN {
            let col: Vec<u32> = users.iter().map(|&u| profiles.user[u][k]).collect();
            let e = tables.terms(g, store, &col)?;
            key_parts.push(e);
            pooled = Some(match pooled {
                None => e,
                Some(p) => g.add(p, e)?,
            });
        }
        let user_query = pooled.expect("history length is positive");
        let key_in = g.concat_cols(&key_parts)?;
        let w = g.param(store, self.gate);
        let keys = g.matmul(key_in, w)?;

        let flat: Vec<u32> = items
            .iter()
            .flat_map(|&i| profiles.item[i].iter().copied())
            .collect();
        let mask = Array2::from_shape_fn((n, ITEM_HISTORY_LEN), |(r, k)| flat[r * ITEM_HISTORY_LEN + k] != PAD);
        let item_terms = tables.terms(g, store, &flat)?;
        let logits = g.group_dot(keys, item_terms)?;
        let weights = g.masked_softmax(logits, &mask)?;
        let item_query = g.group_weighted_sum(weights, item_terms)?;
        Ok(GateOutput {
            weights,
            item_query,
            user_query,
            user_emb,
        })
    }

    /// `MLP(e_u ∥ e_i ∥ e_{q_u} ∥ e_{q_i})` for each pair.
    pub fn generate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tables: &EmbeddingTables,
        profiles: &HistoryProfiles,
        users: &[usize],
        items: &[usize],
    ) -> Result<Var> {
        if users.is_empty() {
            return Ok(g.constant(Matrix::zeros((0, tables.dim))));
        }
        let gate = self.gate(g, store, tables, profiles, users, items)?;
        let item_emb = tables.items(g, store, items)?;
        let input = g.concat_cols(&[gate.user_emb, item_emb, gate.user_query, gate.item_query])?;
        self.mlp.forward(g, store, input)
    }
}

/// Mean over rows of the squared distance between real and generated intents.
/// An empty batch contributes 0.
pub fn supervision_loss(g: &mut Graph, real: Var, generated: Var) -> Result<Var> {
    if g.shape(real)[0] == 0 {
        log::warn!("supervision loss over an empty search batch");
        return Ok(g.constant(Matrix::zeros((1, 1))));
    }
    let diff = g.sub(real, generated)?;
    let sq = g.square(diff);
    let per_record = g.row_sum(sq);
    g.mean(per_record)
}
