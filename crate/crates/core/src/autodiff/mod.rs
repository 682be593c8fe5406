//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded define-by-run on a [`Tape`]; values are [`Tensor`]s
//! and recorded handles are [`Var`]s. The operator set is exactly what the
//! augmentations, encoder and contrastive loss need: broadcasting arithmetic,
//! elementwise maps, reductions, `matmul`, `conv1d`, differentiable linear
//! interpolation, sorting and gathers.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_inputs, GradCheckOptions, GradCheckReport};
pub use tape::{BinaryKind, Gradients, NodeId, ReduceKind, Tape, UnaryKind, Var};
pub use tensor::{broadcast_shape, Tensor, MAX_RANK};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {shape:?} exceeds the maximum rank {MAX_RANK}")]
    RankTooHigh { shape: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("division by zero at divisor index {index}")]
    DivisionByZero { index: usize },
    #[error("{op}: argument outside the domain at index {index}")]
    Domain { op: &'static str, index: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("kernel of size {kernel} does not fit padded input of length {padded}")]
    KernelTooLarge { kernel: usize, padded: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("loss must be rank 0, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("variable belongs to a different tape")]
    DetachedTape,
    #[error("backward already ran on this tape")]
    AlreadyBackpropagated,
    #[error("{0}")]
    InvalidArgument(&'static str),
}

/// Softmax along the last axis with the row maximum subtracted first.
pub fn softmax_last<'t, S: Scalar>(x: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
    let last = last_axis(&x)?;
    let shifted = x.sub(x.max_axis(last, true)?.detach())?;
    let e = shifted.exp();
    e.div(e.sum_axis(last, true)?)
}

/// Log-softmax along the last axis.
pub fn log_softmax_last<'t, S: Scalar>(x: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
    let last = last_axis(&x)?;
    let shifted = x.sub(x.max_axis(last, true)?.detach())?;
    let lse = shifted.exp().sum_axis(last, true)?.log()?;
    shifted.sub(lse)
}

fn last_axis<S: Scalar>(x: &Var<'_, S>) -> Result<usize, AutodiffError> {
    let rank = x.value().rank();
    if rank == 0 {
        return Err(AutodiffError::Rank {
            op: "softmax",
            expected: 1,
            shape: Vec::new(),
        });
    }
    Ok(rank - 1)
}
