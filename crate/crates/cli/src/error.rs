use std::path::PathBuf;

use thiserror::Error;

use crate::idx::IdxError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Idx { path: PathBuf, source: IdxError },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("paired runs diverged: {0}")]
    Integrity(String),
    #[error(transparent)]
    Core(#[from] gradsparse::Error),
}

impl CliError {
    /// 2 for anything wrong with the inputs, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        use gradsparse::Error as E;
        match self {
            CliError::Config(_)
            | CliError::Read { .. }
            | CliError::Parse { .. }
            | CliError::Idx { .. } => 2,
            CliError::Core(E::Config(_) | E::Usage(_) | E::Compile(_)) => 2,
            CliError::Core(E::UndefinedInput(_) | E::Capacity { .. }) => 3,
            CliError::Write { .. } | CliError::Integrity(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Config(msg.into()))
}
