//! Nash-bargaining aggregation of group hypergradients for fairness-aware
//! meta-learning.
//!
//! - [`nn`]: the small MLP with per-example gradients.
//! - [`aggregation`]: the bargaining solver, fixed protocols, baselines.
//! - [`metalearn`]: the two-stage reweighting training loop.
//! - [`synthetic`]: the two-objective toy benchmark.
//! - [`data`]: CSV loading and balanced splitting.
//! - [`metrics`]: AUC, group disparities, alignment rates.

pub mod aggregation;
pub mod cli;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metalearn;
pub mod metrics;
pub mod nn;
pub mod synthetic;

pub use error::{Error, Result};
