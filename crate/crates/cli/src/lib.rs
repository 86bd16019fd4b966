//! Experiment driver: reproducible federated runs from JSON configs, the
//! segmentation sweep, the classification grid, Grad-CAM comparison and the
//! networked server/client pair.

pub mod commands;
mod config;
mod error;
mod metrics;
mod runner;

pub use config::{ExperimentConfig, Task, DEFAULT_REPETITIONS, DEFAULT_THRESHOLD};
pub use error::CliError;
pub use metrics::{MetricsLog, MetricsRow};
pub use runner::{initial_weights, run_simulation, RunOutcome};
