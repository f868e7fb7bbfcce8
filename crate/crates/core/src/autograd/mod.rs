//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Only the operations the restoration networks need are provided. Every
//! operation is recorded on a [`Graph`] tape; [`Graph::backward`] sweeps the
//! tape in reverse and returns per-node gradients.

mod graph;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
