use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}
