use ndarray::Axis;

use super::{Model, TrainContext};
use crate::corpus::{Scenario, QUERY_LEN};
use crate::intent::supervision_loss;
use crate::propagation::{combine_layers, contrastive_loss, propagate, CombinedReprs};
use crate::tensor::{Graph, Matrix, Result, TensorError, Var};

/// Propagated representations and the per-edge intents they were built from.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub reprs: CombinedReprs,
    /// `|E| x d`, one row per training edge.
    pub edge_intents: Var,
}

/// Positive training edges with one sampled negative item each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub edges: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Graph handles of the batch objective and its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub bpr: Var,
    pub supervision: Var,
    pub contrastive: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            total: g.scalar(self.total),
            bpr: g.scalar(self.bpr),
            supervision: g.scalar(self.supervision),
            contrastive: g.scalar(self.contrastive),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub bpr: f64,
    pub supervision: f64,
    pub contrastive: f64,
}

/// `e_u* ∥ e_i* ∥ intent` for each row.
pub fn fuse(g: &mut Graph, reprs: CombinedReprs, users: &[usize], items: &[usize], intents: Var) -> Result<Var> {
    let eu = g.gather_rows(reprs.users, users.to_vec())?;
    let ei = g.gather_rows(reprs.items, items.to_vec())?;
    g.concat_cols(&[eu, ei, intents])
}

/// Mean over pairs of `-ln σ(pos - neg)`.
pub fn bpr_loss(g: &mut Graph, pos: Var, neg: Var) -> Result<Var> {
    let (ps, ns) = (g.shape(pos), g.shape(neg));
    if ps != ns {
        return Err(TensorError::Shape {
            op: "bpr_loss",
            lhs: ps,
            rhs: ns,
        });
    }
    let diff = g.sub(pos, neg)?;
    let l = g.neg_log_sigmoid(diff);
    g.mean(l)
}

impl Model {
    /// Intents for (user, item) pairs without a query: generator output, or
    /// the padding-query embedding under the generator ablation.
    pub fn rec_intents(&self, g: &mut Graph, ctx: &TrainContext, users: &[usize], items: &[usize]) -> Result<Var> {
        if self.ablation.no_dem_int_gen {
            let pad = g.param(&self.params, self.layout.pad_query);
            return g.gather_rows(pad, vec![0; users.len()]);
        }
        let out = self.layout.generator.generate(
            g,
            &self.params,
            &self.layout.tables,
            &ctx.profiles,
            users,
            items,
        )?;
        Ok(if self.ablation.detach_generated_intent { g.detach(out) } else { out })
    }

    /// Pooled embeddings of padded queries, `QUERY_LEN` ids per row.
    pub fn query_intents(&self, g: &mut Graph, queries: &[u32]) -> Result<Var> {
        self.layout.tables.pool(g, &self.params, queries, QUERY_LEN)
    }

    pub fn edge_intents(&self, g: &mut Graph, ctx: &TrainContext) -> Result<Var> {
        let search = self.query_intents(g, &ctx.search_queries)?;
        let pairs = self.rec_intents(g, ctx, &ctx.rec_users, &ctx.rec_items)?;
        let rec = g.gather_rows(pairs, ctx.rec_pair.clone())?;
        let stacked = g.concat_rows(&[search, rec])?;
        g.gather_rows(stacked, ctx.edge_slot.clone())
    }

    /// Full-graph propagation from the current parameters.
    pub fn encode(&self, g: &mut Graph, ctx: &TrainContext) -> Result<Encoded> {
        let edge_intents = self.edge_intents(g, ctx)?;
        let users0 = g.param(&self.params, self.layout.tables.users);
        let items0 = g.param(&self.params, self.layout.tables.items);
        let translate = (!self.ablation.no_int_trans).then_some(edge_intents);
        let stack = propagate(g, &ctx.topology, users0, items0, translate, self.layout.dims.depth)?;
        let reprs = combine_layers(g, &stack)?;
        Ok(Encoded { reprs, edge_intents })
    }

    /// Raw score of fused rows through the scenario's head, `n x 1`.
    pub fn predict(&self, g: &mut Graph, scenario: Scenario, fused: Var) -> Result<Var> {
        self.head(scenario).forward(g, &self.params, fused)
    }

    /// Builds `L = L_o + λ1 L_SG + λ2 L_CL` for one batch.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        ctx: &TrainContext,
        batch: &Batch,
        lambda1: f64,
        lambda2: f64,
    ) -> Result<LossVars> {
        let enc = self.encode(g, ctx)?;
        let records = &ctx.train;

        let mut search_rows = Vec::new();
        let mut rec_rows = Vec::new();
        for (k, &e) in batch.edges.iter().enumerate() {
            if records[e].is_search() {
                search_rows.push(k);
            } else {
                rec_rows.push(k);
            }
        }
        let pick = |rows: &[usize], f: &dyn Fn(usize) -> usize| -> Vec<usize> { rows.iter().map(|&k| f(k)).collect() };
        let user_of = |k: usize| records[batch.edges[k]].user;
        let item_of = |k: usize| records[batch.edges[k]].item;
        let edge_of = |k: usize| batch.edges[k];
        let neg_of = |k: usize| batch.negatives[k];

        let mut pos_scores = Vec::new();
        let mut neg_scores = Vec::new();

        // Search pairs: the negative reuses the session query.
        if !search_rows.is_empty() {
            let users = pick(&search_rows, &user_of);
            let intents = g.gather_rows(enc.edge_intents, pick(&search_rows, &edge_of))?;
            let fused_pos = fuse(g, enc.reprs, &users, &pick(&search_rows, &item_of), intents)?;
            let fused_neg = fuse(g, enc.reprs, &users, &pick(&search_rows, &neg_of), intents)?;
            pos_scores.push(self.predict(g, Scenario::Search, fused_pos)?);
            neg_scores.push(self.predict(g, Scenario::Search, fused_neg)?);
        }
        // Rec pairs: the negative gets its own generated intent.
        if !rec_rows.is_empty() {
            let users = pick(&rec_rows, &user_of);
            let negs = pick(&rec_rows, &neg_of);
            let intents = g.gather_rows(enc.edge_intents, pick(&rec_rows, &edge_of))?;
            let neg_intents = self.rec_intents(g, ctx, &users, &negs)?;
            let fused_pos = fuse(g, enc.reprs, &users, &pick(&rec_rows, &item_of), intents)?;
            let fused_neg = fuse(g, enc.reprs, &users, &negs, neg_intents)?;
            pos_scores.push(self.predict(g, Scenario::Rec, fused_pos)?);
            neg_scores.push(self.predict(g, Scenario::Rec, fused_neg)?);
        }
        let pos = g.concat_rows(&pos_scores)?;
        let neg = g.concat_rows(&neg_scores)?;
        let l_o = bpr_loss(g, pos, neg)?;

        // Supervision on the batch's Search records.
        let s_users = pick(&search_rows, &user_of);
        let s_items = pick(&search_rows, &item_of);
        let queries: Vec<u32> = search_rows
            .iter()
            .flat_map(|&k| records[batch.edges[k]].padded_query())
            .collect();
        let real = self.query_intents(g, &queries)?;
        let generated = self.layout.generator.generate(
            g,
            &self.params,
            &self.layout.tables,
            &ctx.profiles,
            &s_users,
            &s_items,
        )?;
        let l_sg = supervision_loss(g, real, generated)?;

        let all_users: Vec<usize> = batch.edges.iter().map(|&e| records[e].user).collect();
        let all_items: Vec<usize> = batch.edges.iter().map(|&e| records[e].item).collect();
        let pos_intents = g.gather_rows(enc.edge_intents, batch.edges.clone())?;
        let l_cl = contrastive_loss(g, enc.reprs, pos_intents, &all_users, &all_items, &batch.negatives)?;

        let w_sg = g.scale(l_sg, lambda1);
        let w_cl = g.scale(l_cl, lambda2);
        let total = g.add(l_o, w_sg)?;
        let total = g.add(total, w_cl)?;
        Ok(LossVars {
            total,
            bpr: l_o,
            supervision: l_sg,
            contrastive: l_cl,
        })
    }
}

/// Scores candidates with frozen propagated representations.
pub struct Scorer<'a> {
    model: &'a Model,
    ctx: &'a TrainContext,
    pub users_star: Matrix,
    pub items_star: Matrix,
    /// `|E| x d` intents of the training edges.
    pub edge_intents: Matrix,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, ctx: &'a TrainContext) -> Result<Self> {
        let mut g = Graph::new();
        let enc = model.encode(&mut g, ctx)?;
        Ok(Self {
            model,
            ctx,
            users_star: g.value(enc.reprs.users).clone(),
            items_star: g.value(enc.reprs.items).clone(),
            edge_intents: g.value(enc.edge_intents).clone(),
        })
    }

    fn fused(&self, g: &mut Graph, users: &[usize], items: &[usize], intents: Var) -> Result<Var> {
        let eu = self.users_star.select(Axis(0), users);
        let ei = self.items_star.select(Axis(0), items);
        let eu = g.constant(eu);
        let ei = g.constant(ei);
        g.concat_cols(&[eu, ei, intents])
    }

    /// Scores rows `(users[k], items[k])`. Search rows take `queries`
    /// (`QUERY_LEN` padded ids per row); Rec rows use generated intents.
    pub fn score(&self, scenario: Scenario, users: &[usize], items: &[usize], queries: &[u32]) -> Result<Vec<f64>> {
        if users.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let intents = match scenario {
            Scenario::Search => self.model.query_intents(&mut g, queries)?,
            Scenario::Rec => self.model.rec_intents(&mut g, self.ctx, users, items)?,
        };
        let fused = self.fused(&mut g, users, items, intents)?;
        let out = self.model.predict(&mut g, scenario, fused)?;
        Ok(g.value(out).column(0).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bpr_closed_forms() {
        let mut g = Graph::new();
        let p = g.constant(array![[2.0], [0.0]]);
        let n = g.constant(array![[2.0], [0.0]]);
        let l = bpr_loss(&mut g, p, n).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
        let p = g.constant(array![[1.5]]);
        let n = g.constant(array![[0.5]]);
        let l = bpr_loss(&mut g, p, n).unwrap();
        assert!((g.scalar(l) - 0.313_261_687_5).abs() < 1e-9);
        let p = g.constant(array![[60.0]]);
        let n = g.constant(array![[0.0]]);
        let l = bpr_loss(&mut g, p, n).unwrap();
        assert!(g.scalar(l) > 0.0 && g.scalar(l) < 1e-25);
        let bad = g.constant(array![[1.0], [2.0]]);
        assert!(bpr_loss(&mut g, p, bad).is_err());
    }

    #[test]
    fn fuse_layout() {
        let mut g = Graph::new();
        let users = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let items = g.constant(array![[5.0, 6.0]]);
        let reprs = CombinedReprs { users, items };
        let q = g.constant(array![[0.0, 0.0]]);
        let f = fuse(&mut g, reprs, &[1], &[0], q).unwrap();
        assert_eq!(g.value(f), &array![[3.0, 4.0, 5.0, 6.0, 0.0, 0.0]]);
    }
}
