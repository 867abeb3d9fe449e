//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! The op set is deliberately small: matmul, elementwise add/mul, scaling,
//! reshape/transpose, row gathers, concatenation, column slices, means,
//! layer normalization, tanh-GELU, masked softmax, MSE and cross-entropy.
//! All ops work on row-major 2-D matrices unless stated otherwise, and every
//! forward result is checked for NaN/infinity.

mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, Probe, ProbeResult};
pub use tape::{gelu_grad_scalar, gelu_scalar, Gradients, NodeId, Tape};
pub use tensor::{lit, Real, Tensor};
