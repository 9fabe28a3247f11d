//! Dense tensors, a tape-based reverse-mode differentiation graph, and
//! optimizers operating on named parameter groups.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter it as
//! leaves bound to a [`ParamRef`]; after [`Graph::backward`] their gradients
//! are read back with [`Graph::param_grads`] and accumulated into the owning
//! [`ParameterGroup`]s before an [`OptimizerState`] step.

mod gradcheck;
mod graph;
mod optim;
mod suite;
mod tensor;

pub use gradcheck::{compare_with_finite_differences, gradient_check, relative_error};
pub use graph::{Graph, NodeId, ParamRef};
pub use optim::{
    clip_grad_norm, OptimizerKind, OptimizerState, Param, ParameterGroup, DEFAULT_CLIP_NORM,
};
pub use suite::{primitive_checks, SUITE_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error(
        "backward already ran on this graph; higher-order or repeated backward is unsupported"
    )]
    BackwardTwice,
    #[error("function is not deterministic; supply explicit dropout masks")]
    NonDeterministic,
    #[error("trainable parameter {name} has no gradient")]
    MissingGradient { name: String },
    #[error("{0}")]
    InvalidArgument(String),
}
