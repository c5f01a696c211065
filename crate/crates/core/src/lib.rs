//! Corrected decorrelated score inference for high-dimensional linear
//! regression with one error-prone covariate.

pub mod cli;
pub mod cocolasso;
pub mod decorrelation;
pub mod error;
pub mod inference;
pub mod model_data;
pub mod psd;
pub mod simplex;
pub mod simulation;

pub use error::{Error, Result};
