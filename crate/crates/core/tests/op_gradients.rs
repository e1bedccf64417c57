//! Finite-difference checks of every differentiable op on random inputs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualintent::tensor::{grad_check, Graph, Matrix, ParamStore, Result, Var};

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5))
}

/// Reduces any output to a scalar through a fixed random projection so
/// that every output coordinate carries a distinct weight.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let [r, c] = g.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, r, c));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check(store: &ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>) {
    let report = grad_check(store, EPS, |g, s| {
        let out = f(g, s)?;
        project(g, out, 77)
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report}");
    assert!(report.coords_checked > 0);
}

fn store_with(shapes: &[(usize, usize)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (k, &(r, c)) in shapes.iter().enumerate() {
        s.add(format!("p{k}"), random(&mut rng, r, c));
    }
    s
}

fn p(g: &mut Graph, s: &ParamStore, k: usize) -> Var {
    g.param(s, s.find(&format!("p{k}")).unwrap())
}

#[test]
fn elementwise_and_matmul() {
    let s = store_with(&[(4, 3), (4, 3), (3, 5), (1, 5)], 1);
    check(&s, |g, s| {
        let (a, b, w, bias) = (p(g, s, 0), p(g, s, 1), p(g, s, 2), p(g, s, 3));
        let x = g.mul(a, b)?;
        let x = g.sub(x, a)?;
        let x = g.matmul(x, w)?;
        let x = g.add_bias(x, bias)?;
        let x = g.sigmoid(x);
        let y = g.square(x);
        let y = g.scale(y, -0.7);
        g.add(x, y)
    });
}

#[test]
fn relu_away_from_kink() {
    let mut s = store_with(&[(5, 4)], 2);
    let id = s.find("p0").unwrap();
    s.value_mut(id).mapv_inplace(|x| if x.abs() < 0.05 { 0.3 } else { x });
    check(&s, |g, s| {
        let a = p(g, s, 0);
        Ok(g.relu(a))
    });
}

#[test]
fn log_and_stable_logistic_loss() {
    let mut s = store_with(&[(3, 3), (6, 1)], 3);
    let id = s.find("p0").unwrap();
    s.value_mut(id).mapv_inplace(|x| x.abs() + 0.5);
    let id = s.find("p1").unwrap();
    s.value_mut(id)[[0, 0]] = -40.0;
    s.value_mut(id)[[1, 0]] = 35.0;
    check(&s, |g, s| {
        let (a, z) = (p(g, s, 0), p(g, s, 1));
        let l = g.log(a);
        let n = g.neg_log_sigmoid(z);
        let (ls, ns) = (g.sum(l), g.mean(n)?);
        let both = g.concat_rows(&[ls, ns])?;
        Ok(both)
    });
}

#[test]
fn concat_and_reductions() {
    let s = store_with(&[(3, 2), (3, 4), (2, 6)], 4);
    check(&s, |g, s| {
        let (a, b, c) = (p(g, s, 0), p(g, s, 1), p(g, s, 2));
        let ab = g.concat_cols(&[a, b])?;
        let abc = g.concat_rows(&[ab, c])?;
        let rs = g.row_sum(abc);
        let m = g.mean(abc)?;
        let rs = g.square(rs);
        let total = g.sum(rs);
        g.add(total, m)
    });
}

#[test]
fn gather_and_scatter_mean() {
    let s = store_with(&[(5, 3), (7, 3), (4, 3)], 5);
    check(&s, |g, s| {
        let (table, msgs, fallback) = (p(g, s, 0), p(g, s, 1), p(g, s, 2));
        let picked = g.gather_rows(table, vec![4, 0, 0, 2, 4, 4, 1])?;
        let m = g.mul(picked, msgs)?;
        // target 3 receives nothing and copies its fallback row
        g.scatter_mean(m, vec![0, 2, 0, 1, 2, 2, 0], fallback)
    });
}

#[test]
fn grouped_ops_and_masked_softmax() {
    let (n, m, d) = (3, 4, 5);
    let s = store_with(&[(n, d), (n * m, d), (n * 3, d)], 6);
    let mask = Array2::from_shape_fn((n, m), |(r, k)| !(r == 1 && k >= 2) && r != 2 || (r == 2 && k == 0));
    check(&s, move |g, s| {
        let (keys, items, triples) = (p(g, s, 0), p(g, s, 1), p(g, s, 2));
        let logits = g.group_dot(keys, items)?;
        let w = g.masked_softmax(logits, &mask)?;
        let pooled = g.group_weighted_sum(w, items)?;
        let summed = g.group_sum(triples, 3)?;
        g.add(pooled, summed)
    });
}

#[test]
fn detach_blocks_gradient() {
    let s = store_with(&[(2, 2)], 7);
    let id = s.find("p0").unwrap();
    let mut g = Graph::new();
    let a = g.param(&s, id);
    let d = g.detach(a);
    let sq = g.square(d);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let mut work = s.clone();
    work.zero_grad();
    g.accumulate_param_grads(&grads, &mut work).unwrap();
    assert!(work.grad(id).iter().all(|&x| x == 0.0));
}
