use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ZptError>;

#[derive(Debug, Error)]
pub enum ZptError {
    /// Malformed or inconsistent on-disk data.
    #[error("load error in {location}: {message}")]
    Load { location: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Invalid configuration; `field` names the offending setting.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    /// A caller broke an operation's precondition (shape, length, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Zero-norm vectors and similar values outside a function's domain.
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    /// Non-finite loss or similar failure during optimization.
    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Training {
        epoch: usize,
        step: usize,
        message: String,
    },

    /// Operation attempted on an object in the wrong lifecycle state.
    #[error("invalid state: {0}")]
    State(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl ZptError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn load(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Load {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
