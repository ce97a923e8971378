//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Build a [`Graph`] per step, register trainable tensors with
//! [`Graph::param`], compose ops, and call [`Graph::backward`] on a scalar.

mod check;
mod graph;
mod tensor;

pub use check::grad_check;
pub use graph::{Graph, Var, PROB_EPS};
pub use tensor::Tensor;

pub(crate) use graph::log_sum_exp;
