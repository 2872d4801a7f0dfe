//! Retrieval augmented anomaly detection.
//!
//! Analysts mark false positives; their embeddings go into an [`FpStore`].
//! Every later batch of model outputs is matched against that store and each
//! score is discounted by how closely the event resembles a known mistake.
//!
//! - [`adjust`]: the adjustment math (pure functions).
//! - [`store`]: the annotation store with exact nearest-neighbour search.
//! - [`pipeline`]: batch processing with next-batch visibility of annotations.
//! - [`diagnostics`]: separability gate and evaluation metrics.
//! - [`synth`]: synthetic feedback-loop experiments.
//! - [`wire`]: NDJSON and JSON formats shared by the CLI and HTTP service.

pub mod adjust;
pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod pipeline;
pub mod store;
pub mod synth;
pub mod wire;

pub use adjust::{
    adjust_event, adjust_loss, adjust_probability, adjusted_similarity, distance_factor, fit_adjustment_curve,
    fp_confidence, loss_factor, AdjustmentConfig, AdjustmentCurve, AdjustmentOutcome, MatchResult, ScoreKind,
};
pub use embedding::{cosine_similarity, euclidean_distance, EmbeddingVector};
pub use error::{AdjustError, DiagnosticsError, PipelineError, StoreError, SynthError};
pub use pipeline::{BatchResult, EventOutcome, Pipeline, Reject, RejectReason, ScoredEvent};
pub use store::{AnnotationId, FpAnnotation, FpStore, NewAnnotation, StoreSnapshot, StoreState};
