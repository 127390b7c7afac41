use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing image file for image_id `{image_id}` (expected {path})")]
    MissingImage { image_id: String, path: PathBuf },

    #[error("malformed annotation at line {line}: {reason}")]
    Annotation { line: usize, reason: String },

    #[error("malformed artifact metadata: {0}")]
    Metadata(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("detector weights are not initialized")]
    Uninitialized,

    #[error("singular thin-plate-spline system (collinear or duplicate control points)")]
    SingularTps,

    #[error("non-finite loss at {stage} step {step}")]
    NonFiniteLoss { stage: &'static str, step: usize },

    #[error("toy detector reached held-out AP {ap:.4} < required {required:.4}; increase the training budget")]
    TrainingBudget { ap: f64, required: f64 },

    #[error("missing artifact: {0}")]
    MissingArtifact(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
