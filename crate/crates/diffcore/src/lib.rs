//! Minimal dense-tensor arithmetic with reverse-mode differentiation for the
//! operator set of a guide-filter network: standard and transposed
//! convolution, softmax, per-pixel spatially variant filtering and per-pixel
//! channel mixing, plus the reshaping, pooling and loss primitives around
//! them.

mod error;
pub mod gradcheck;
mod kernels;
pub mod ops;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::ConvParams;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DualTensor, Tensor};
