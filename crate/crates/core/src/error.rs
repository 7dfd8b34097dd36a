use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("query point is out of view")]
    OutOfView,

    #[error("invalid disparity {0}: must be positive")]
    InvalidDisparity(f64),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("image {width}x{height} is smaller than the {min}x{min} patch")]
    ImageTooSmall { width: usize, height: usize, min: usize },

    #[error("pixel ({u}, {v}) lies outside the {width}x{height} image")]
    PixelOutsideImage { u: i64, v: i64, width: usize, height: usize },

    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate embedding: second fully connected layer output is all zero")]
    DegenerateEmbedding,

    #[error("nothing to cluster: no false-positive or false-negative predictions")]
    NothingToCluster,

    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { what: what.into(), reason: reason.into() }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidParameter { .. } | Error::Config(_) => ErrorCategory::Usage,
            Error::NonFiniteLoss { .. } | Error::DegenerateEmbedding => ErrorCategory::Numerical,
            _ => ErrorCategory::Data,
        }
    }
}
