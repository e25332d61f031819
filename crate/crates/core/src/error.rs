use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent parameters, dimensions or policy sets.
    #[error("configuration error: {0}")]
    Config(String),

    /// Logged data violating a model invariant (e.g. a zero propensity).
    #[error("data error: {0}")]
    Data(String),

    /// Inputs outside an operation's domain.
    #[error("input error: {0}")]
    Input(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn data(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}

pub(crate) fn input(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}
