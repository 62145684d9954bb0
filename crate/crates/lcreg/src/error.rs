use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library. Data-loading failures get distinct
/// variants so callers can tell them apart programmatically.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("covariance not PSD")]
    CovarianceNotPsd,

    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("no samples found in {0}")]
    NoSamples(PathBuf),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("malformed labels CSV at line {line}: {reason}")]
    MalformedCsv { line: usize, reason: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("bad tensor file {path}: {reason}")]
    BadTensorFile { path: PathBuf, reason: String },

    #[error("checkpoint is missing tensors: {0:?}")]
    MissingTensors(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: u64 },

    #[error("unknown augmentation strategy '{name}', known strategies: {known:?}")]
    UnknownStrategy { name: String, known: Vec<&'static str> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
