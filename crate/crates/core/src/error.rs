use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("image {image_id} has no pixel data")]
    NoPixels { image_id: u64 },

    #[error("object {object_id} rasterizes to an empty mask")]
    EmptyMask { object_id: i64 },

    #[error("fact set for image {image_id} is empty")]
    EmptyFacts { image_id: u64 },

    #[error("question list is empty")]
    EmptyQuestions,

    #[error("remote backend unavailable after {attempts} attempt(s): {reason}")]
    RemoteUnavailable { attempts: u32, reason: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite value in record {index}")]
    NonFiniteValue { index: u64 },

    #[error("trusted and untrusted activations share no (sample, layer, head) keys")]
    NoOverlap,

    #[error("no activation pairs for cell (layer {layer}, head {head})")]
    EmptyCell { layer: usize, head: usize },

    #[error("edit mode requires an offset estimator but none was supplied")]
    MissingEstimator,

    #[error("covariance is degenerate (all vectors identical)")]
    DegenerateCovariance,

    #[error("no training samples for head (layer {layer}, head {head})")]
    EmptyHeadDataset { layer: usize, head: usize },

    #[error("training diverged for head (layer {layer}, head {head}) at epoch {epoch}")]
    DivergedLoss {
        layer: usize,
        head: usize,
        epoch: usize,
    },

    #[error("estimator does not cover head (layer {layer}, head {head})")]
    UncoveredHead { layer: usize, head: usize },

    #[error(
        "bias target unmet: conflict accuracy {conflict_accuracy:.3}, \
         non-conflict accuracy {clean_accuracy:.3}"
    )]
    BiasTargetUnmet {
        conflict_accuracy: f64,
        clean_accuracy: f64,
    },

    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SeqTooLong { len: usize, max: usize },

    #[error("length mismatch: {left} predictions vs {right} gold labels")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl std::fmt::Display, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.to_string(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input data rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidArgument(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
