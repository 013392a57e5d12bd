//! Tensor arithmetic, differentiable primitives, the MAC-counting hook and
//! the finite-difference gradient oracle.

pub mod counter;
pub mod gradcheck;
pub mod kernels;
mod ops;
pub mod real;
pub mod tape;
pub mod tensor;

pub use ops::gelu_scalar;
pub use real::{DType, Real};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

/// LayerNorm / GroupNorm epsilon used throughout the model.
pub const NORM_EPS: f64 = 1e-6;
