//! Experiment runner: strict TOML configs, training runs with checkpoints
//! and snapshots, and the sweep, probe and arrangement studies as CSVs.

pub mod commands;
pub mod config;
pub mod error;
pub mod runs;
pub mod table;

pub use config::{ExperimentConfig, Overrides, RuleName};
pub use error::{CliError, CliResult};
