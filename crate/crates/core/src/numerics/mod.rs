//! Tensor arithmetic and reverse-mode automatic differentiation.
//!
//! Models are recorded once as an [`ExprGraph`] of named leaves and ops, then
//! evaluated against borrowed [`Bindings`] in either `f32` or `f64`.

mod autodiff;
mod eval;
mod graph;
pub mod kernels;

pub use autodiff::{finite_difference_gradient, forward_backward, gradient, value_and_gradient, vjp};
pub use eval::{evaluate, evaluate_all, BatchStats, Bindings, Evaluation, Mode};
pub use graph::{ExprGraph, NodeId, Op, BN_EPS, BN_MOMENTUM};
