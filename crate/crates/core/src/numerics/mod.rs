//! Differentiable arrays: tensors, a reverse-mode tape, and a
//! finite-difference gradient checker.

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck, DEFAULT_STEP, DEFAULT_TOLERANCE};
pub use scalar::Scalar;
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a one-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value in {name}")]
    NonFinite { name: String },
}

/// Differentiable operations provided by [`Tape`], each with a forward and a
/// backward pass.
pub fn required_ops() -> &'static [&'static str] {
    &[
        "conv2d(stride 1|2)",
        "upsample2x+conv2d",
        "relu",
        "sigmoid",
        "add",
        "mul",
        "concat(channels)",
        "mean",
        "sum",
        "abs",
        "sq_diff",
        "flatten",
        "cosine_similarity",
    ]
}
