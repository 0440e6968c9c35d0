use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("click ({row}, {col}) outside {height}x{width} image")]
    OutOfBoundsClick {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("prediction already matches ground truth")]
    NoMisclassifiedPixels,

    #[error("divisibility violated: {0}")]
    DivisibilityViolation(String),

    #[error("ground truth mask is empty")]
    EmptyGroundTruth,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("malformed dataset: {0}")]
    MalformedDataset(String),

    #[error("encoder features requested without model weights")]
    MissingWeights,

    #[error("memory bank is empty")]
    EmptyMemory,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("weights format: {0}")]
    Format(String),

    #[error("non-finite training loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
