//! Empirical-likelihood information criteria for model selection under
//! estimating equations.

pub mod cli_runner;
pub mod criteria;
pub mod el_core;
pub mod error;
pub mod estimating_equations;
pub mod model_fitting;
pub mod sim_engine;

pub use error::{ElcicError, Result};
