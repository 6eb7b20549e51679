//! Discrete-event simulator for cost-aware serving of classifier ensembles.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod metrics;
pub mod scenario;
pub mod sim;
pub mod validate;
pub mod estimate;
pub mod market;
pub mod predictor;
pub mod resources;
pub mod rng;
pub mod selector;
pub mod voting;
pub mod workload;
pub mod zoo;

pub use error::{Error, Result};
