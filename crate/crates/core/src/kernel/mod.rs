//! Dense tensors with reverse-mode gradients.
//!
//! The op set is small: affine maps, elementwise arithmetic,
//! `tanh`/`exp`/`log`/`sigmoid`, row normalization, cosine matrices, row
//! softmax, reductions, row gathers, column concatenation, and `detach`.
//! Every loss in the crate is assembled from these and differentiated by
//! [`Graph::backward`]; [`grad_check`] compares the result against central
//! differences.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, relative_error, GradReport};
pub use graph::{Gradients, Graph, NodeId, OpKind};
pub(crate) use tensor::dot;
pub use tensor::{cosine_matrix, l2_normalize, softmax_rows, Normalized, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("row index {index} out of range for {rows} rows")]
    Index { index: usize, rows: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    Step(f64),
    #[error("unknown op '{0}'")]
    UnknownOp(String),
}
