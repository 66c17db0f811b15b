use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Inconsistent shapes or parameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called out of order or without required state.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("undefined input: {0}")]
    UndefinedInput(String),
    #[error("compile error: {0}")]
    Compile(String),
    #[error("buffer capacity exceeded in layer {layer}: live set of {needed} bytes exceeds {capacity} bytes")]
    Capacity {
        layer: usize,
        needed: u64,
        capacity: u64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
