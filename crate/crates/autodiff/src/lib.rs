//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a [`Graph`] records primitives eagerly
//! and replays them backwards, a [`ParameterStore`] holds named trainable
//! tensors, and [`finite_difference_check`] validates any loss built on top.
//! Broadcasting is limited to a leading batch axis on the right operand.

mod check;
mod error;
mod graph;
mod store;
mod tensor;

pub use check::{finite_difference_check, relative_error, GradCheckReport};
pub use error::{AutodiffError, Result};
pub use graph::{Graph, OpKind, Var};
pub use store::ParameterStore;
pub use tensor::Tensor;
