//! Trajectory forecasting with a variational recurrent backbone conditioned
//! on learned short-term motion patterns and pattern-derived social context.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
