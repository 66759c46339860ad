use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported perturbation family `{0}`")]
    UnsupportedFamily(String),
    #[error("perturbation magnitude {magnitude} outside [{lo}, {hi}] for {family}")]
    MagnitudeOutOfRange {
        family: String,
        magnitude: f64,
        lo: f64,
        hi: f64,
    },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated { what: String, expected: u64, actual: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
