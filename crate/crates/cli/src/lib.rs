//! Config-driven experiment runner.
pub mod config;
pub mod pipeline;

pub use config::{load, parse, ConfigError, ExperimentConfig, LoadedConfig};
pub use pipeline::{execute, Command, RunError, RunOutcome, Status, Summary};
