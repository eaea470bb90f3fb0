use thiserror::Error;

/// Errors raised anywhere in the grounding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error in `{op}`: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("training aborted at step {step}: non-finite {term} loss")]
    NonFiniteLoss { step: usize, term: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
