//! Configuration-driven experiment runner for `tvo-gpbandit`.

pub mod config;
pub mod error;
pub mod experiments;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use experiments::{prepare, run, RunOptions};
