use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum SquidError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed digit archive: {0}")]
    MalformedArchive(String),

    #[error("digit bank has no instances for classes {0:?}")]
    IncompleteBank(Vec<u8>),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("memory queue can only be updated in training mode")]
    QueueUpdateInInference,

    #[error("degenerate calibration: discriminator outputs have zero spread")]
    DegenerateCalibration,

    #[error("model has no score calibration")]
    Uncalibrated,

    #[error("labels contain a single class; both normal and abnormal samples are required")]
    SingleClass,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("abnormal sample in a training batch: {0}")]
    AbnormalInTraining(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

pub type Result<T> = std::result::Result<T, SquidError>;

impl SquidError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SquidError::Io { path: path.into(), source }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        SquidError::Shape { expected: expected.to_string(), actual: actual.to_string() }
    }
}
