use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

    /// The requested training-set composition cannot be built from the data.
    #[error("dataset composition: {0}")]
    Composition(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("feature schema mismatch: {message}; expected header: {expected}")]
    Schema { message: String, expected: String },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("unsupported model file version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u64, supported: u64 },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (shots: {shots:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        shots: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
