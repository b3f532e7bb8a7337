//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Covers exactly the operations a small pre-norm transformer needs:
//! matmul, add, scale, embedding gather, softmax, layer norm, GELU,
//! cross-entropy, causal masking, transpose, reshape, row concat/slice and sum.
//! Values are `f32`; loss reductions accumulate in `f64`.

pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite input to {op}")]
    NonFiniteInput { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is not connected to any tracked tensor")]
    DisconnectedGraph,
    #[error("index {index} out of range (size {len})")]
    IndexOutOfRange { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
