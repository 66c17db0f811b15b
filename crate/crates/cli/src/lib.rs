//! Command-line harness around `gradsparse`: experiment files, IDX
//! datasets, run directories and the `train` / `simulate` /
//! `dump-schedule` / `selftest` commands.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod idx;
pub mod output;

pub use commands::{DumpStage, RunMode};
pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Result};
