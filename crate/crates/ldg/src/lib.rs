//! Experiment harness, file formats and report emission on top of `ldg-core`.

pub mod error;
pub mod harness;
pub mod io;
pub mod report;

pub use error::{HarnessError, Result};
pub use harness::{train, Estimator, ExperimentConfig, TrainingRecord};
