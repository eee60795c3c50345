//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the plain value type: a row-major buffer plus shape, cheap
//! to clone (the buffer is shared). Differentiation happens on a [`Tape`]:
//! operations executed through the tape record their inputs, and
//! [`Tape::backward`] replays them in reverse to fill gradients.

pub(crate) mod kernels;
mod tape;
mod value;

pub use tape::{Tape, Var};
pub use value::Tensor;

use thiserror::Error;

/// Errors surfaced by tensor construction and tensor operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: kernel {kernel:?} larger than padded input {padded:?}")]
    KernelTooLarge {
        op: &'static str,
        kernel: (usize, usize),
        padded: (usize, usize),
    },
    #[error("{op} produced a non-finite value (finite-check mode)")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;
