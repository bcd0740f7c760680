use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RainError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RainError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
}

impl RainError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RainError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            RainError::Usage(_) => 1,
            RainError::Io { .. } | RainError::Format(_) => 2,
            RainError::MissingPrerequisite(_) => 3,
            RainError::NonFinite(_)
            | RainError::Divergence(_)
            | RainError::DegenerateGeometry(_)
            | RainError::Contract(_) => 4,
        }
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(RainError::Contract(msg()))
    }
}
