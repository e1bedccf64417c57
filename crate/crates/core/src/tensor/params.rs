use super::{Matrix, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    /// Rows that never receive updates (e.g. the padding term embedding).
    pub frozen_rows: Vec<usize>,
}

/// Ordered collection of parameters. Insertion order is the canonical
/// order used by the optimizer and by checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let grad = Matrix::zeros(value.raw_dim());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            frozen_rows: Vec::new(),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn freeze_rows(&mut self, id: ParamId, rows: &[usize]) {
        let p = &mut self.params[id.0];
        for &r in rows {
            p.value.row_mut(r).fill(0.0);
            if !p.frozen_rows.contains(&r) {
                p.frozen_rows.push(r);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `grad` into the accumulator of `id`; frozen rows stay zero.
    pub fn accumulate(&mut self, id: ParamId, grad: &Matrix) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.raw_dim() != grad.raw_dim() {
            return Err(TensorError::Shape {
                op: "accumulate",
                lhs: [p.grad.nrows(), p.grad.ncols()],
                rhs: [grad.nrows(), grad.ncols()],
            });
        }
        p.grad += grad;
        for &r in &p.frozen_rows {
            p.grad.row_mut(r).fill(0.0);
        }
        Ok(())
    }

    /// Copies all values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.assign(&src.value);
        }
    }
}
