use thiserror::Error;

/// Errors surfaced by the numerical engine and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// A mathematically undefined operation, e.g. inverting the zero quaternion.
    #[error("domain error: {0}")]
    Domain(String),

    /// Arguments violate an operation's shape or value contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A model, training or experiment configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary or text artifact could not be decoded.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }

    /// True when the error stems from bad user input rather than an engine fault.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Divergence { .. } | Error::Domain(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
