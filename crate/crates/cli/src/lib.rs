//! Experiment runner for the multi-level solver: config parsing, the `run`,
//! `grad-check` and `report` commands, and the CSV/JSON artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{ExperimentConfig, LevelSection};
pub use error::CliError;
