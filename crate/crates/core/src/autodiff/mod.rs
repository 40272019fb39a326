//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Learnable tensors
//! enter it through [`Graph::param`], inputs through [`Graph::constant`],
//! and [`Graph::backward`] fills the parameter gradients.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, relative_error, GradCheck, GradCheckError, GradReport};
pub use graph::{Graph, Var};
pub use tensor::{Tensor, TensorError};

#[cfg(test)]
mod tests;
