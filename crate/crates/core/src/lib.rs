//! Inference on a single treatment coefficient in logistic regression with
//! many controls: penalized first stages, orthogonalized third-stage
//! estimators, confidence regions and a Monte Carlo harness.

pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod numeric;
pub mod pen_logistic;
pub mod simulate;
pub mod weighted_lasso;

pub use data::{Dataset, Standardized};
pub use error::{Error, Result};
