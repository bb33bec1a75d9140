//! Functional Neural Processes: exchangeable stochastic processes whose
//! predictions come from a learned graph of dependencies between local
//! latent variables, together with the baselines they are compared against.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod distributions;
pub mod error;
pub mod inference;
pub mod model;
pub mod nn;
pub mod noise;
pub mod run;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
