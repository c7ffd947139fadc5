use std::path::Path;

use thiserror::Error;

/// Errors surfaced by the library. Shape problems always carry both shapes so
/// the diagnostic names what was actually passed in.
#[derive(Debug, Error)]
pub enum FgaError {
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("annotation point {index} out of bounds: ({x}, {y}) not inside {width}x{height}")]
    PointOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("malformed {format} data in {path}: {message}")]
    Format {
        format: &'static str,
        path: String,
        message: String,
    },

    #[error("non-finite gradient for parameter `{name}`; step aborted")]
    NonFiniteGradient { name: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FgaError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        FgaError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, path: &Path, message: impl Into<String>) -> Self {
        FgaError::Format {
            format,
            path: path.display().to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FgaError>;
