//! Minimal dense numeric engine: tensors, forward kernels, a reverse-mode
//! tape and a finite-difference gradient checker.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use kernels::{cross_entropy, matmul, rmsnorm, rope_apply, softmax_rows, CrossEntropy};
pub use tape::{AttnMask, AttnShape, Gradients, Graph, Var};
pub use tensor::Tensor;

/// Engine scalar. 64-bit unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Float = f64;
#[cfg(feature = "f32")]
pub type Float = f32;

/// Byte tag of [`Float`] in the checkpoint container (0 = f64, 1 = f32).
#[cfg(not(feature = "f32"))]
pub const FLOAT_DTYPE: u8 = 0;
#[cfg(feature = "f32")]
pub const FLOAT_DTYPE: u8 = 1;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("structural error: {0}")]
    Structural(String),
}

pub type Result<T> = std::result::Result<T, NumError>;
