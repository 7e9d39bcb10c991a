use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("zero-norm region vector at cell {cell:?}")]
    ZeroNormRegion { cell: (usize, usize) },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64, repro: String },
    #[error("task/label mismatch: {0}")]
    TaskMismatch(String),
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("dataset format: {0}")]
    DatasetFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidScene(_) => "INVALID_SCENE",
            Error::InvalidConfig(_) => "INVALID_CONFIG",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::DatasetTooSmall(_) => "DATASET_TOO_SMALL",
            Error::DegenerateEmbedding(_) => "DEGENERATE_EMBEDDING",
            Error::ZeroNormRegion { .. } => "ZERO_NORM_REGION",
            Error::NonFiniteLoss { .. } => "NON_FINITE_LOSS",
            Error::TaskMismatch(_) => "TASK_MISMATCH",
            Error::CheckpointNotFound(_) => "CKPT_NOT_FOUND",
            Error::Checkpoint(_) => "CKPT_FORMAT",
            Error::DatasetFormat(_) => "DATASET_FORMAT",
            Error::Io(_) => "IO",
            Error::Json(_) => "JSON",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
