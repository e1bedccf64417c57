use std::collections::HashMap;

use ndarray::{s, Axis};

use super::{shape_of, Matrix, ParamId, ParamStore, Result, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Square(Var),
    NegLogSigmoid(Var),
    MaskedSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    ScatterMean {
        msgs: Var,
        targets: Vec<usize>,
        counts: Vec<usize>,
        fallback: Var,
    },
    GroupSum(Var, usize),
    GroupDot(Var, Var),
    GroupWeightedSum(Var, Var),
    Unary(Var, fn(f64) -> f64),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// A dynamically built computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` visits it in reverse exactly once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    relu_margin: Option<f64>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> TensorError {
    TensorError::Shape {
        op,
        lhs: shape_of(a),
        rhs: shape_of(b),
    }
}

fn flat<'a>(m: &'a ndarray::CowArray<'_, f64, ndarray::Ix2>) -> &'a [f64] {
    m.as_slice().expect("standard layout")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^{-x})`, i.e. `-ln sigmoid(x)`, without overflow.
fn softplus_neg(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Smallest `|x|` fed to any ReLU so far; `None` without ReLUs.
    pub fn relu_margin(&self) -> Option<f64> {
        self.relu_margin
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        shape_of(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf not tied to a parameter store.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// every use of the parameter accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.raw_dim() != vb.raw_dim() {
            return Err(shape_err("add", va, vb));
        }
        let out = va + vb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.raw_dim() != vb.raw_dim() {
            return Err(shape_err("sub", va, vb));
        }
        let out = va - vb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.raw_dim() != vb.raw_dim() {
            return Err(shape_err("mul", va, vb));
        }
        let out = va * vb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `a + 1 * bias` where `bias` is a `1 x m` row added to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(shape_err("add_bias", va, vb));
        }
        let out = va + &vb.row(0);
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va, vb));
        }
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        for &p in &parts[1..] {
            if self.value(p).nrows() != first.nrows() {
                return Err(shape_err("concat_cols", first, self.value(p)));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        for &p in &parts[1..] {
            if self.value(p).ncols() != first.ncols() {
                return Err(shape_err("concat_rows", first, self.value(p)));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Matrix::from_elem((1, 1), s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let m = va.sum() / va.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Matrix::from_elem((1, 1), m), Op::Mean(a), rg))
    }

    /// Sum across columns: `n x m -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(out, Op::RowSum(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let margin = self.value(a).iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.relu_margin = Some(self.relu_margin.map_or(margin, |m| m.min(margin)));
        let out = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    /// Elementwise `-ln sigmoid(x)`, evaluated stably.
    pub fn neg_log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus_neg);
        let rg = self.rg(a);
        self.push(out, Op::NegLogSigmoid(a), rg)
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn unary(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let out = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(out, Op::Unary(a, df), rg)
    }

    /// Row-wise softmax over the positions where `mask` is true. Masked
    /// positions get weight 0; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &ndarray::Array2<bool>) -> Result<Var> {
        let va = self.value(a);
        if mask.raw_dim() != va.raw_dim() {
            return Err(TensorError::Shape {
                op: "masked_softmax",
                lhs: shape_of(va),
                rhs: [mask.nrows(), mask.ncols()],
            });
        }
        let mut out = Matrix::zeros(va.raw_dim());
        for ((row, mrow), mut orow) in va.rows().into_iter().zip(mask.rows()).zip(out.rows_mut()) {
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for ((o, &x), &m) in orow.iter_mut().zip(row).zip(mrow) {
                if m {
                    *o = (x - max).exp();
                    total += *o;
                }
            }
            orow.mapv_inplace(|o| o / total);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskedSoftmax(a), rg))
    }

    /// Embedding lookup: row `k` of the output is row `idx[k]` of `a`.
    /// The backward pass scatter-adds into the looked-up rows only.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        let d = va.ncols();
        if let Some(&i) = idx.iter().find(|&&i| i >= va.nrows()) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: i,
                rows: va.nrows(),
            });
        }
        let src = va.as_standard_layout();
        let src = flat(&src);
        let mut buf = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            buf.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Matrix::from_shape_vec((idx.len(), d), buf).expect("len x d buffer");
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, idx), rg))
    }

    /// Segment mean: output row `t` is the mean of the `msgs` rows whose
    /// target is `t`; rows with no incoming message copy `fallback[t]`.
    pub fn scatter_mean(&mut self, msgs: Var, targets: Vec<usize>, fallback: Var) -> Result<Var> {
        let (vm, vf) = (self.value(msgs), self.value(fallback));
        if vm.nrows() != targets.len() || vm.ncols() != vf.ncols() {
            return Err(shape_err("scatter_mean", vm, vf));
        }
        let (n, d) = vf.dim();
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(TensorError::Index {
                op: "scatter_mean",
                index: t,
                rows: n,
            });
        }
        let (ms, fs) = (vm.as_standard_layout(), vf.as_standard_layout());
        let (ms, fs) = (flat(&ms), flat(&fs));
        let mut counts = vec![0usize; n];
        let mut buf = vec![0.0; n * d];
        for (e, &t) in targets.iter().enumerate() {
            counts[t] += 1;
            axpy(&mut buf[t * d..(t + 1) * d], 1.0, &ms[e * d..(e + 1) * d]);
        }
        for (t, &c) in counts.iter().enumerate() {
            let row = &mut buf[t * d..(t + 1) * d];
            if c == 0 {
                row.copy_from_slice(&fs[t * d..(t + 1) * d]);
            } else {
                let inv = 1.0 / c as f64;
                row.iter_mut().for_each(|x| *x *= inv);
            }
        }
        let out = Matrix::from_shape_vec((n, d), buf).expect("n x d buffer");
        let rg = self.rg(msgs) || self.rg(fallback);
        Ok(self.push(
            out,
            Op::ScatterMean {
                msgs,
                targets,
                counts,
                fallback,
            },
            rg,
        ))
    }

    /// Sums consecutive groups of `group` rows: `(n*group) x d -> n x d`.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Result<Var> {
        let va = self.value(a);
        if group == 0 || va.nrows() % group != 0 {
            return Err(TensorError::Invalid {
                op: "group_sum",
                msg: format!("{} rows not divisible into groups of {group}", va.nrows()),
            });
        }
        let n = va.nrows() / group;
        let out = va
            .to_shape((n, group, va.ncols()))
            .expect("standard layout")
            .sum_axis(Axis(1));
        let rg = self.rg(a);
        Ok(self.push(out, Op::GroupSum(a, group), rg))
    }

    /// `out[r, k] = <keys[r], items[r*m + k]>` for `keys: n x d`,
    /// `items: (n*m) x d`, giving `n x m`.
    pub fn group_dot(&mut self, keys: Var, items: Var) -> Result<Var> {
        let (vk, vi) = (self.value(keys), self.value(items));
        let n = vk.nrows();
        if vk.ncols() != vi.ncols() || n == 0 || vi.nrows() % n != 0 {
            return Err(shape_err("group_dot", vk, vi));
        }
        let m = vi.nrows() / n;
        let d = vk.ncols();
        let (ks, is) = (vk.as_standard_layout(), vi.as_standard_layout());
        let (ks, is) = (flat(&ks), flat(&is));
        let out = Matrix::from_shape_fn((n, m), |(r, k)| {
            dot(&ks[r * d..(r + 1) * d], &is[(r * m + k) * d..(r * m + k + 1) * d])
        });
        let rg = self.rg(keys) || self.rg(items);
        Ok(self.push(out, Op::GroupDot(keys, items), rg))
    }

    /// `out[r] = sum_k weights[r, k] * items[r*m + k]` for `weights: n x m`.
    pub fn group_weighted_sum(&mut self, weights: Var, items: Var) -> Result<Var> {
        let (vw, vi) = (self.value(weights), self.value(items));
        let (n, m) = (vw.nrows(), vw.ncols());
        if vi.nrows() != n * m {
            return Err(shape_err("group_weighted_sum", vw, vi));
        }
        let d = vi.ncols();
        let (ws, is) = (vw.as_standard_layout(), vi.as_standard_layout());
        let (ws, is) = (flat(&ws), flat(&is));
        let mut buf = vec![0.0; n * d];
        for (r, out) in buf.chunks_exact_mut(d.max(1)).enumerate().take(n) {
            for k in 0..m {
                axpy(out, ws[r * m + k], &is[(r * m + k) * d..(r * m + k + 1) * d]);
            }
        }
        let out = Matrix::from_shape_vec((n, d), buf).expect("n x d buffer");
        let rg = self.rg(weights) || self.rg(items);
        Ok(self.push(out, Op::GroupWeightedSum(weights, items), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Matrix::zeros(self.nodes[v.0].value.raw_dim()));
        }
        f(slot.as_mut().expect("initialized above"));
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.accum(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.accum(grads, *a, g * *c),
            Op::AddBias(a, b) => {
                self.accum(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accum(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accum(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.rg(p) {
                        self.accum(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.rg(p) {
                        self.accum(grads, p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::Sum(a) => {
                let v = g[[0, 0]];
                self.accum(grads, *a, Matrix::from_elem(self.value(*a).raw_dim(), v));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let v = g[[0, 0]] / va.len() as f64;
                self.accum(grads, *a, Matrix::from_elem(va.raw_dim(), v));
            }
            Op::RowSum(a) => {
                let va = self.value(*a);
                let delta = g
                    .broadcast(va.raw_dim())
                    .expect("n x 1 broadcasts to n x m")
                    .to_owned();
                self.accum(grads, *a, delta);
            }
            Op::Relu(a) => {
                let mut delta = g.clone();
                delta.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accum(grads, *a, delta);
            }
            Op::Sigmoid(a) => {
                let mut delta = g.clone();
                delta.zip_mut_with(&node.value, |d, &s| *d *= s * (1.0 - s));
                self.accum(grads, *a, delta);
            }
            Op::Log(a) => self.accum(grads, *a, g / self.value(*a)),
            Op::Square(a) => self.accum(grads, *a, g * self.value(*a) * 2.0),
            Op::NegLogSigmoid(a) => {
                let mut delta = g.clone();
                delta.zip_mut_with(self.value(*a), |d, &x| *d *= sigmoid(x) - 1.0);
                self.accum(grads, *a, delta);
            }
            Op::Unary(a, df) => {
                let mut delta = g.clone();
                delta.zip_mut_with(self.value(*a), |d, &x| *d *= df(x));
                self.accum(grads, *a, delta);
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let mut delta = Matrix::zeros(y.raw_dim());
                for ((yr, gr), mut dr) in y.rows().into_iter().zip(g.rows()).zip(delta.rows_mut()) {
                    let dot = yr.dot(&gr);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accum(grads, *a, delta);
            }
            Op::GatherRows(a, idx) => {
                let d = g.ncols();
                let gs = g.as_standard_layout();
                let gs = flat(&gs);
                self.accum_with(grads, *a, |ga| {
                    let dst = ga.as_slice_mut().expect("standard layout");
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(&mut dst[i * d..(i + 1) * d], 1.0, &gs[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::ScatterMean {
                msgs,
                targets,
                counts,
                fallback,
            } => {
                let d = g.ncols();
                let gs = g.as_standard_layout();
                let gs = flat(&gs);
                if self.rg(*msgs) {
                    let mut buf = Vec::with_capacity(targets.len() * d);
                    for &t in targets {
                        let inv = 1.0 / counts[t] as f64;
                        buf.extend(gs[t * d..(t + 1) * d].iter().map(|x| x * inv));
                    }
                    let delta = Matrix::from_shape_vec((targets.len(), d), buf).expect("e x d buffer");
                    self.accum(grads, *msgs, delta);
                }
                self.accum_with(grads, *fallback, |gf| {
                    for (t, &c) in counts.iter().enumerate() {
                        if c == 0 {
                            let mut row = gf.row_mut(t);
                            row += &g.row(t);
                        }
                    }
                });
            }
            Op::GroupSum(a, group) => {
                let va = self.value(*a);
                self.accum_with(grads, *a, |ga| {
                    for r in 0..va.nrows() {
                        let mut row = ga.row_mut(r);
                        row += &g.row(r / group);
                    }
                });
            }
            Op::GroupDot(keys, items) => {
                let (vk, vi) = (self.value(*keys), self.value(*items));
                let (n, m, d) = (vk.nrows(), g.ncols(), vk.ncols());
                let (ks, is, gs) = (vk.as_standard_layout(), vi.as_standard_layout(), g.as_standard_layout());
                let (ks, is, gs) = (flat(&ks), flat(&is), flat(&gs));
                if self.rg(*keys) {
                    let mut buf = vec![0.0; n * d];
                    for r in 0..n {
                        let out = &mut buf[r * d..(r + 1) * d];
                        for k in 0..m {
                            axpy(out, gs[r * m + k], &is[(r * m + k) * d..(r * m + k + 1) * d]);
                        }
                    }
                    self.accum(grads, *keys, Matrix::from_shape_vec((n, d), buf).expect("n x d"));
                }
                if self.rg(*items) {
                    let mut buf = vec![0.0; n * m * d];
                    for r in 0..n {
                        for k in 0..m {
                            let j = r * m + k;
                            axpy(&mut buf[j * d..(j + 1) * d], gs[j], &ks[r * d..(r + 1) * d]);
                        }
                    }
                    self.accum(grads, *items, Matrix::from_shape_vec((n * m, d), buf).expect("nm x d"));
                }
            }
            Op::GroupWeightedSum(weights, items) => {
                let (vw, vi) = (self.value(*weights), self.value(*items));
                let (n, m, d) = (vw.nrows(), vw.ncols(), vi.ncols());
                let (ws, is, gs) = (vw.as_standard_layout(), vi.as_standard_layout(), g.as_standard_layout());
                let (ws, is, gs) = (flat(&ws), flat(&is), flat(&gs));
                if self.rg(*weights) {
                    let delta = Matrix::from_shape_fn((n, m), |(r, k)| {
                        dot(&gs[r * d..(r + 1) * d], &is[(r * m + k) * d..(r * m + k + 1) * d])
                    });
                    self.accum(grads, *weights, delta);
                }
                if self.rg(*items) {
                    let mut buf = vec![0.0; n * m * d];
                    for r in 0..n {
                        for k in 0..m {
                            let j = r * m + k;
                            axpy(&mut buf[j * d..(j + 1) * d], ws[j], &gs[r * d..(r + 1) * d]);
                        }
                    }
                    self.accum(grads, *items, Matrix::from_shape_vec((n * m, d), buf).expect("nm x d"));
                }
            }
        }
    }

    /// Adds the gradient of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        let mut entries: Vec<_> = self.params.iter().collect();
        entries.sort_by_key(|(id, _)| **id);
        for (&id, &v) in entries {
            if let Some(g) = grads.get(v) {
                store.accumulate(id, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn masked_softmax_values() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 1.0], [1.0, 2.0], [5.0, 9.0]]);
        let mask = ndarray::array![[true, true], [true, true], [true, false]];
        let y = g.masked_softmax(x, &mask).unwrap();
        let v = g.value(y);
        assert_abs_diff_eq!(v[[0, 0]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v[[0, 1]], 0.5, epsilon = 1e-15);
        // 1 / (1 + e) and e / (1 + e)
        assert_abs_diff_eq!(v[[1, 0]], 0.2689414213699951, epsilon = 1e-12);
        assert_abs_diff_eq!(v[[1, 1]], 0.7310585786300049, epsilon = 1e-12);
        assert_eq!(v[[2, 0]], 1.0);
        assert_eq!(v[[2, 1]], 0.0);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut g = Graph::new();
        let x = g.variable(array![[3.0, -1.0]]);
        let y = g.masked_softmax(x, &array![[false, false]]).unwrap();
        assert_eq!(g.value(y), &array![[0.0, 0.0]]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[0.0, 0.0]]);
    }

    #[test]
    fn square_sum_grad() {
        let mut g = Graph::new();
        let x = g.variable(array![[3.0]]);
        let sq = g.square(x);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn relu_margin_tracks_smallest_input() {
        let mut g = Graph::new();
        assert_eq!(g.relu_margin(), None);
        let a = g.constant(array![[0.5, -0.25], [3.0, -1.0]]);
        g.relu(a);
        assert_eq!(g.relu_margin(), Some(0.25));
        let b = g.constant(array![[-1e-9]]);
        g.relu(b);
        assert_eq!(g.relu_margin(), Some(1e-9));
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(array![[0.0]]);
        let s = g.sigmoid(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 0.25);
    }

    #[test]
    fn reuse_accumulates() {
        // loss = sum(x * x + x) => d/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.variable(array![[2.0, -1.0]]);
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[5.0, -1.0]]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(array![[1.0, 2.0]]);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss([1, 2]))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros((2, 3)));
        let b = g.constant(Matrix::zeros((2, 3)));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "matmul: incompatible shapes [2, 3] and [2, 3]");
        let c = g.constant(Matrix::zeros((3, 2)));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn gather_backward_touches_only_looked_up_rows() {
        let mut g = Graph::new();
        let table = g.variable(Matrix::from_shape_fn((5, 3), |(r, c)| (r * 3 + c) as f64));
        let rows = g.gather_rows(table, vec![1, 3, 1]).unwrap();
        let loss = g.sum(rows);
        let grads = g.backward(loss).unwrap();
        let gt = grads.get(table).unwrap();
        assert_eq!(gt.row(0).sum(), 0.0);
        assert_eq!(gt.row(1).to_vec(), vec![2.0; 3]);
        assert_eq!(gt.row(2).sum(), 0.0);
        assert_eq!(gt.row(3).to_vec(), vec![1.0; 3]);
        assert_eq!(gt.row(4).sum(), 0.0);
        assert!(g.gather_rows(table, vec![5]).is_err());
    }

    #[test]
    fn scatter_mean_isolated_rows_copy_fallback() {
        let mut g = Graph::new();
        let msgs = g.constant(array![[1.0], [3.0], [10.0]]);
        let fb = g.constant(array![[-1.0], [-2.0], [-3.0]]);
        let out = g.scatter_mean(msgs, vec![0, 0, 2], fb).unwrap();
        assert_eq!(g.value(out), &array![[2.0], [-2.0], [10.0]]);
    }

    #[test]
    fn neg_log_sigmoid_is_stable() {
        let mut g = Graph::new();
        let x = g.constant(array![[0.0, 1.0, -800.0, 800.0]]);
        let y = g.neg_log_sigmoid(x);
        let v = g.value(y);
        assert_abs_diff_eq!(v[[0, 0]], std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(v[[0, 1]], 0.31326168751822286, epsilon = 1e-15);
        assert_eq!(v[[0, 2]], 800.0);
        assert_eq!(v[[0, 3]], 0.0);
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.5]]);
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        g.accumulate_param_grads(&grads, &mut store).unwrap();
        assert_eq!(store.grad(id)[[0, 0]], 3.0);
    }
}
