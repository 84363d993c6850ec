use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported dtype {0:?}, only little-endian float32 ('<f4') is accepted")]
    UnsupportedDtype(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("layer {layer:?} did not converge: delta {delta:.6e} > epsilon^2 {epsilon_sq:.6e}")]
    NotConverged { layer: String, delta: f64, epsilon_sq: f64 },

    #[error("dense and level-decomposed passes disagree at layer {layer:?}: relative gap {gap:.3e}")]
    PathMismatch { layer: String, gap: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by reading or writing files, as opposed to
    /// failures of the computation itself.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Format(_) | Error::UnsupportedDtype(_) | Error::Json(_)
        )
    }
}
