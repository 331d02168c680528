//! Minimal reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Graph`] records a fixed set of operations; [`Graph::backward`] returns
//! [`Gradients`] keyed by the [`ParamStore`] the parameters came from.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{evaluate_with_gradients, finite_difference_check, finite_difference_report, FdReport};
pub use graph::{argmax, Graph, KeySets, Var};
pub use params::{Adam, Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{default_precision, set_default_precision, Precision, PrecisionGuard, Tensor};
