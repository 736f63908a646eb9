use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, dimensions or configuration values that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was used out of order, e.g. a tape replayed after backward.
    #[error("usage error: {0}")]
    Usage(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A network produced NaN or infinite values.
    #[error("model health error: {0}")]
    ModelHealth(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    /// Diagnostics could not be computed from the supplied logs.
    #[error("diagnostics refused: {0}")]
    Diagnostics(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed log {path}: {msg}")]
    Log { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn health(msg: impl Into<String>) -> Error {
    Error::ModelHealth(msg.into())
}
