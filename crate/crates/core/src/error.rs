use thiserror::Error;

/// Errors raised by the adjustment math and embedding construction.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdjustError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("value out of domain: {0}")]
    DomainError(String),
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(&'static str),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dimension mismatch: store has dim {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("query {index}: dimension mismatch: store has dim {expected}, got {actual}")]
    BatchDimensionMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u32),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("only one class present in ground truth")]
    SingleClass,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown event {event_id:?} in batch {batch_id}")]
    UnknownEvent { batch_id: u64, event_id: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Adjust(#[from] AdjustError),
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Spec(#[from] DiagnosticsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}
