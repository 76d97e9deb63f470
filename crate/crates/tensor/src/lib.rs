//! Dense `f64` arrays and a reverse-mode differentiation tape.
//!
//! Values live on a [`Tape`]; each operation appends a node and returns a
//! [`Var`] handle. [`Tape::backward`] walks the tape once in reverse and
//! leaves `∂loss/∂node` on every node that requires a gradient.
//!
//! Only one broadcast exists ([`Tape::add_bias`], over the last axis). Every
//! other shape disagreement is a [`TensorError`].

pub mod check;
mod error;
mod kernels;
mod tape;
mod tensor;


pub use error::{Result, TensorError};
pub use kernels::{log_sum_exp, sigmoid, softplus};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
