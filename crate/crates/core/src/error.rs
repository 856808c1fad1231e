use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numeric contract was violated by the caller (e.g. backward from a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// An upstream pipeline stage has not produced its artifact yet.
    #[error("missing artifact {path}: run the `{stage}` stage first")]
    MissingStage { stage: String, path: PathBuf },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) => "invalid_shape",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::InvalidInput(_) => "invalid_input",
            Error::Contract(_) => "contract",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Config { .. } => "config",
            Error::MissingStage { .. } => "missing_stage",
        }
    }
}
