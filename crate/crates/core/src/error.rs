use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SdanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SdanError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Parameters or model configuration are inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A reduction was requested over an empty set (e.g. all-zero masks).
    #[error("undefined result: {0}")]
    Undefined(String),

    /// A non-finite value was found where finite data is required.
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SdanError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        SdanError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SdanError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SdanError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn decode(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        SdanError::Decode {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
