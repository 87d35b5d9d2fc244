// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod stiefel;
pub mod walkthrough;

pub use error::{Error, Result};
