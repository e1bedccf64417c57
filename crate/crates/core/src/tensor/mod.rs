//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! Every value in the model is a row-major `f64` matrix. Vectors are `1 x n`
//! rows and scalars are `1 x 1`. A [`Graph`] records operations as they are
//! applied and [`Graph::backward`] walks the record in reverse to produce
//! gradients. Trainable tensors live in a [`ParamStore`] outside the graph so
//! a fresh graph can be built for every optimizer step.

mod gradcheck;
mod graph;
mod optim;
mod params;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, AdamWState};
pub use params::{Param, ParamId, ParamStore};

/// The matrix type backing every tensor.
pub type Matrix = ndarray::Array2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{op}: row index {index} out of range for {rows} rows")]
    Index {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("non-finite gradient in parameter `{name}` at step {step}")]
    NonFiniteGradient { name: String, step: u64 },
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_of(m: &Matrix) -> [usize; 2] {
    [m.nrows(), m.ncols()]
}
