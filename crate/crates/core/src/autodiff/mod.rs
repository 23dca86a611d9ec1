//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are created
//! with [`Graph::param`] (differentiable) or [`Graph::constant`]; every
//! primitive appends a node holding its value and the record needed to
//! route gradients back to its inputs.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{check_gradient, finite_diff_grad, relative_error, GradCheck};
pub use graph::{sigmoid, Graph, NodeId, LOG_FLOOR};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-positive argument {value} to an unclamped log")]
    NonPositiveLog { op: &'static str, value: f64 },
    #[error("{op}: row {row} has zero norm")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("backward needs a one-element root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}
