//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! The operation set is closed: matmul, 3×3 conv2d, nearest ×2 upsample,
//! relu, softplus, add, sub, mul, div, broadcast bias add, scale, sum, mean,
//! row mean, reshape, transpose, column concat, L2 norm, row softmax and
//! stop-gradient. Everything else in the crate is built from these.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradReport, ParamError, MAX_EPS, MIN_EPS};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
