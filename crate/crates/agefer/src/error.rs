//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    // manifest
    #[error("age must be non-negative and finite, got {0}")]
    InvalidAge(f64),

    #[error("unknown expression label {0:?}")]
    UnknownExpression(String),

    #[error("unknown age group {0:?}")]
    UnknownAgeGroup(String),

    #[error("duplicate sample_id {0:?}")]
    DuplicateSampleId(String),

    #[error("manifest {0:?} contains no valid records")]
    EmptyManifest(String),

    #[error("manifest is missing required column {0:?}")]
    MissingColumn(String),

    #[error("fold count k={0} must be at least 2")]
    BadFoldCount(usize),

    #[error("age estimator failed on {image_ref:?}: {reason}")]
    EstimatorFailure { image_ref: String, reason: String },

    // weighting
    #[error("expression class {0} has zero training samples")]
    EmptyClass(crate::manifest::Expression),

    #[error("no non-empty (expression, age group) cells in the training pool")]
    AllCellsEmpty,

    #[error("density weighting requires a non-empty, finite age list")]
    BadAgeList,

    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),

    // preprocess
    #[error("no face detected in image")]
    NoFaceDetected,

    #[error("face detector failed: {0}")]
    DetectorFailure(String),

    #[error("landmark detector failed: {0}")]
    LandmarkFailure(String),

    #[error("degenerate face box ({width}x{height})")]
    DegenerateBox { width: usize, height: usize },

    #[error("input image is empty")]
    EmptyImage,

    // modelkit
    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("loss mix lambda must be non-negative, got {0}")]
    NegativeLambda(f64),

    #[error("variant {0:?} requires an age input")]
    MissingAgeInput(crate::modelkit::VariantKind),

    #[error("variant {0:?} does not accept an age input")]
    UnexpectedAgeInput(crate::modelkit::VariantKind),

    #[error("invalid model config: {0}")]
    BadModelConfig(String),

    #[error("checkpoint format mismatch: expected {expected:?}, found {found:?}")]
    CheckpointMismatch { expected: String, found: String },

    // trainer
    #[error("fold {0} is empty")]
    EmptyFold(usize),

    #[error("invalid training config: {0}")]
    BadTrainConfig(String),

    #[error("record {0:?} has no usable age for an age-aware variant")]
    MissingRecordAge(String),

    // metrics
    #[error("no predictions to evaluate")]
    NoPredictions,

    #[error("fold reports have mismatched structure: {0}")]
    ReportStructureMismatch(String),

    // xai
    #[error("degenerate landmark set: {0}")]
    DegenerateLandmarks(String),

    #[error("cannot aggregate an empty heatmap list")]
    EmptyAggregation,

    #[error("grid shape mismatch: expected {expected:?}, got {got:?}")]
    GridShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    // synth
    #[error("invalid synth spec: {0}")]
    BadSynthSpec(String),

    #[error("image store has no entry for {0:?}")]
    MissingImage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
