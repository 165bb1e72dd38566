//! Tensor kernels, reverse-mode differentiation, parameters, and
//! finite-difference oracles.

pub mod fd;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use kernels::{conv2d, gelu, global_avg_pool, layer_norm, matmul, softmax_rows};
pub use params::{ParamGrads, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::GridTensor;

pub use fd::{log_abs_det, numerical_jacobian};
