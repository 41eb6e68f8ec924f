use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum GlatError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{message} at line {line}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("non-finite update in {0}")]
    NonFiniteUpdate(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("gradient check failed: max relative error {max_rel_error:e} in {param}")]
    GradientCheck { param: String, max_rel_error: f64 },
}

pub type Result<T> = std::result::Result<T, GlatError>;

impl GlatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GlatError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        GlatError::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        GlatError::Invalid(message.into())
    }

    pub(crate) fn dims(message: impl Into<String>) -> Self {
        GlatError::DimensionMismatch(message.into())
    }
}
