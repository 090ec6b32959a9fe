use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, dimensions or parameter values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Failure while optimizing (non-finite values, degenerate batches).
    #[error("training error: {0}")]
    Training(String),

    /// Invalid sample data (labels out of range, NaN features).
    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Incompatible uploads or snapshots exchanged between clients and server.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    /// API misuse such as calling backward on a non-scalar value.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
