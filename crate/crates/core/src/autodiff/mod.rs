//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Leaves are copied in from
//! [`Tensor`]s, operations append nodes, and [`Graph::backward`] walks the
//! tape in reverse to produce a [`Gradients`] map keyed by [`Var`].
//!
//! Broadcasting is limited to [`Graph::add_row_bias`]; every other op
//! requires exact shape agreement and reports a
//! [`ShapeMismatch`](crate::Error::ShapeMismatch) otherwise.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_gradient, max_relative_error};
pub use graph::{logsumexp, Gradients, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
