use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detector pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange { label: usize, classes: usize, row: usize },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration} (epoch {epoch}, image {image}): {detail}")]
    NonFiniteLoss {
        iteration: u64,
        epoch: usize,
        image: u64,
        detail: String,
    },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
