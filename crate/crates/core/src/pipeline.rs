//! Batch post-processing.
//!
//! Each batch pins one store state and one config when it starts. Annotations
//! and config changes that complete before a batch starts are reflected in
//! it; anything that happens while the batch runs only affects later batches.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjust::{adjust_event, validate_score, AdjustmentConfig, AdjustmentOutcome};
use crate::embedding::EmbeddingVector;
use crate::error::{AdjustError, PipelineError};
use crate::store::{AnnotationId, FpStore, NewAnnotation, StoreState};
use crate::wire;

pub const DEFAULT_RETENTION: usize = 1024;

/// One model output awaiting adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEvent {
    pub event_id: String,
    pub embedding: EmbeddingVector,
    pub score: f64,
    pub occurred_at: Option<DateTime<Utc>>,
}

impl ScoredEvent {
    pub fn new(event_id: impl Into<String>, embedding: EmbeddingVector, score: f64) -> Self {
        Self {
            event_id: event_id.into(),
            embedding,
            score,
            occurred_at: None,
        }
    }
}

/// Adjustment result for one event as reported on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub event_id: String,
    pub score_original: f64,
    pub score_adjusted: f64,
    pub fp_confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_closest: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_closest: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation_id: Option<AnnotationId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    InvalidJson,
    InvalidEmbedding,
    DimensionMismatch,
    ScoreOutOfRange,
    DuplicateEventId,
}

/// An input record that was skipped. `line` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub batch_id: u64,
    pub store_generation: u64,
    pub outcomes: Vec<EventOutcome>,
    /// Event ids whose adjusted score exceeds the alert threshold.
    pub alerts: Vec<String>,
    pub rejects: Vec<Reject>,
}

impl BatchResult {
    pub fn outcome(&self, event_id: &str) -> Option<&EventOutcome> {
        self.outcomes.iter().find(|o| o.event_id == event_id)
    }
}

/// A processed batch plus what is needed to annotate its events later.
#[derive(Debug)]
pub struct RetainedBatch {
    pub result: BatchResult,
    pub config: AdjustmentConfig,
    embeddings: HashMap<String, EmbeddingVector>,
}

impl RetainedBatch {
    pub fn embedding(&self, event_id: &str) -> Option<&EmbeddingVector> {
        self.embeddings.get(event_id)
    }
}

/// Adjusts a numbered batch against a fixed store state and config.
///
/// Pure: the same inputs always give the same result. `prior` holds rejects
/// found before this stage (e.g. unparseable lines).
pub fn evaluate_batch(
    batch_id: u64,
    events: Vec<(usize, ScoredEvent)>,
    prior: Vec<Reject>,
    cfg: &AdjustmentConfig,
    state: &StoreState,
) -> RetainedBatch {
    let mut rejects = prior;
    let mut seen = HashSet::with_capacity(events.len());
    let mut valid = Vec::with_capacity(events.len());
    // an empty store has no dimension yet; the first accepted event sets one
    let mut dim = state.dim();
    for (line, event) in events {
        let reason = if validate_score(event.score, cfg.score_kind).is_err() {
            Some(RejectReason::ScoreOutOfRange)
        } else if *dim.get_or_insert(event.embedding.dim()) != event.embedding.dim() {
            Some(RejectReason::DimensionMismatch)
        } else if !seen.insert(event.event_id.clone()) {
            Some(RejectReason::DuplicateEventId)
        } else {
            None
        };
        match reason {
            Some(reason) => rejects.push(Reject { line, reason }),
            None => valid.push(event),
        }
    }
    rejects.sort_by_key(|r| r.line);

    let queries: Vec<&EmbeddingVector> = valid.iter().map(|e| &e.embedding).collect();
    let matches = state.nearest_many(&queries);
    let outcomes: Vec<EventOutcome> = valid
        .par_iter()
        .zip(matches)
        .map(|(event, matched)| {
            let adj = adjust_event(event.score, matched.as_ref(), cfg).expect("score range checked during validation");
            EventOutcome {
                event_id: event.event_id.clone(),
                score_original: adj.score_original,
                score_adjusted: adj.score_adjusted,
                fp_confidence: adj.fp_confidence,
                theta_closest: matched.map(|m| m.theta_closest),
                d_closest: matched.map(|m| m.d_closest),
                annotation_id: adj.annotation_id,
            }
        })
        .collect();

    let alerts = outcomes
        .iter()
        .filter(|o| cfg.is_alert(o.score_adjusted))
        .map(|o| o.event_id.clone())
        .collect();
    let embeddings = valid.into_iter().map(|e| (e.event_id, e.embedding)).collect();

    RetainedBatch {
        result: BatchResult {
            batch_id,
            store_generation: state.generation(),
            outcomes,
            alerts,
            rejects,
        },
        config: *cfg,
        embeddings,
    }
}

/// Full per-event explanation, as computed by [`adjust_event`].
pub fn explain(outcome: &EventOutcome, cfg: &AdjustmentConfig) -> Result<AdjustmentOutcome, AdjustError> {
    let matched = match (outcome.theta_closest, outcome.d_closest, outcome.annotation_id) {
        (Some(theta_closest), Some(d_closest), Some(annotation_id)) => Some(crate::MatchResult {
            theta_closest,
            d_closest,
            annotation_id,
        }),
        _ => None,
    };
    adjust_event(outcome.score_original, matched.as_ref(), cfg)
}

/// The stateful engine: store, live config and retained batch results.
pub struct Pipeline {
    store: Arc<FpStore>,
    config: RwLock<AdjustmentConfig>,
    retention: usize,
    next_batch_id: AtomicU64,
    retained: Mutex<BTreeMap<u64, Arc<RetainedBatch>>>,
}

impl Pipeline {
    pub fn new(store: Arc<FpStore>, config: AdjustmentConfig) -> Result<Self, AdjustError> {
        Self::with_retention(store, config, DEFAULT_RETENTION)
    }

    pub fn with_retention(
        store: Arc<FpStore>,
        config: AdjustmentConfig,
        retention: usize,
    ) -> Result<Self, AdjustError> {
        config.validate()?;
        if retention == 0 {
            return Err(AdjustError::InvalidHyperparameter(
                "batch retention must be at least 1".into(),
            ));
        }
        Ok(Self {
            store,
            config: RwLock::new(config),
            retention,
            next_batch_id: AtomicU64::new(0),
            retained: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn store(&self) -> &Arc<FpStore> {
        &self.store
    }

    pub fn config(&self) -> AdjustmentConfig {
        *self.config.read()
    }

    /// Replaces the config for batches that start after this returns.
    pub fn set_config(&self, cfg: AdjustmentConfig) -> Result<(), AdjustError> {
        cfg.validate()?;
        *self.config.write() = cfg;
        Ok(())
    }

    pub fn retention(&self) -> usize {
        self.retention
    }

    pub fn process_batch(&self, events: Vec<ScoredEvent>) -> Arc<RetainedBatch> {
        let numbered = events.into_iter().enumerate().map(|(i, e)| (i + 1, e)).collect();
        self.process_numbered(numbered, Vec::new())
    }

    /// Parses an NDJSON body and processes it. Malformed lines become rejects.
    pub fn process_ndjson(&self, body: &str) -> Arc<RetainedBatch> {
        let parsed = wire::parse_ndjson(body);
        self.process_numbered(parsed.events, parsed.rejects)
    }

    pub fn process_numbered(&self, events: Vec<(usize, ScoredEvent)>, prior: Vec<Reject>) -> Arc<RetainedBatch> {
        let (batch_id, cfg, state) = self.begin();
        self.finish(evaluate_batch(batch_id, events, prior, &cfg, &state))
    }

    /// Pins the config and store state for a new batch.
    pub fn begin(&self) -> (u64, AdjustmentConfig, Arc<StoreState>) {
        let cfg = self.config();
        let state = self.store.snapshot();
        let batch_id = self.next_batch_id.fetch_add(1, Ordering::SeqCst);
        (batch_id, cfg, state)
    }

    /// Retains a batch evaluated against a state obtained from [`begin`](Self::begin).
    pub fn finish(&self, batch: RetainedBatch) -> Arc<RetainedBatch> {
        let batch = Arc::new(batch);
        let mut retained = self.retained.lock();
        retained.insert(batch.result.batch_id, Arc::clone(&batch));
        while retained.len() > self.retention {
            retained.pop_first();
        }
        batch
    }

    pub fn batch(&self, batch_id: u64) -> Option<Arc<RetainedBatch>> {
        self.retained.lock().get(&batch_id).cloned()
    }

    pub fn latest_batch(&self) -> Option<Arc<RetainedBatch>> {
        self.retained.lock().last_key_value().map(|(_, b)| Arc::clone(b))
    }

    /// Stores the embedding of a retained event as a false positive. Visible
    /// to every batch that starts after this returns.
    pub fn annotate_from_outcome(
        &self,
        batch_id: u64,
        event_id: &str,
        annotator: &str,
        note: Option<String>,
    ) -> Result<AnnotationId, PipelineError> {
        let unknown = || PipelineError::UnknownEvent {
            batch_id,
            event_id: event_id.to_string(),
        };
        let batch = self.batch(batch_id).ok_or_else(unknown)?;
        let embedding = batch.embedding(event_id).ok_or_else(unknown)?.clone();
        let id = self
            .store
            .insert(NewAnnotation::now(embedding, event_id, annotator, note))?;
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjust::ScoreKind;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn cfg() -> AdjustmentConfig {
        AdjustmentConfig {
            tau: 0.95,
            alpha: 60.0,
            delta: None,
            score_kind: ScoreKind::Probability,
            alert_threshold: 0.5,
        }
    }

    fn pipeline() -> Pipeline {
        Pipeline::new(Arc::new(FpStore::in_memory()), cfg()).unwrap()
    }

    #[test]
    fn empty_store_is_identity() {
        let p = pipeline();
        let events = vec![
            ScoredEvent::new("a", ev(&[1.0, 0.0]), 0.9),
            ScoredEvent::new("b", ev(&[0.0, 1.0]), 0.2),
            ScoredEvent::new("c", ev(&[1.0, 1.0]), 0.7),
        ];
        let b = p.process_batch(events);
        let r = &b.result;
        assert_eq!(r.batch_id, 0);
        assert_eq!(r.outcomes.len(), 3);
        for o in &r.outcomes {
            assert_eq!(o.score_adjusted, o.score_original);
            assert_eq!(o.fp_confidence, 0.0);
            assert_eq!(o.annotation_id, None);
        }
        assert_eq!(r.alerts, vec!["a".to_string(), "c".to_string()]);
        assert!(r.rejects.is_empty());
    }

    #[test]
    fn annotation_suppresses_exact_repeat() {
        let p = pipeline();
        let e = ScoredEvent::new("e", ev(&[0.3, -0.2, 0.9]), 0.9);
        let first = p.process_batch(vec![e.clone()]);
        assert_eq!(first.result.alerts, vec!["e"]);
        let id = p
            .annotate_from_outcome(first.result.batch_id, "e", "alice", None)
            .unwrap();
        let second = p.process_batch(vec![e]);
        let o = &second.result.outcomes[0];
        assert_eq!(o.score_adjusted, 0.0);
        assert_eq!(o.annotation_id, Some(id));
        assert!(second.result.alerts.is_empty());
        assert_eq!(explain(o, &second.config).unwrap().fp_confidence, 1.0);
    }

    #[test]
    fn duplicate_annotations_are_allowed() {
        let p = pipeline();
        let b = p.process_batch(vec![ScoredEvent::new("e", ev(&[1.0, 2.0]), 0.9)]);
        let a = p.annotate_from_outcome(b.result.batch_id, "e", "x", None).unwrap();
        let c = p.annotate_from_outcome(b.result.batch_id, "e", "x", None).unwrap();
        assert_ne!(a, c);
        let next = p.process_batch(vec![ScoredEvent::new("e", ev(&[1.0, 2.0]), 0.9)]);
        assert_eq!(next.result.outcomes[0].annotation_id, Some(a));
    }

    #[test]
    fn near_duplicate_is_suppressed() {
        let p = pipeline();
        let base = [1.0, 0.0, 0.0, 0.0];
        let b = p.process_batch(vec![ScoredEvent::new("e", ev(&base), 0.9)]);
        p.annotate_from_outcome(b.result.batch_id, "e", "x", None).unwrap();
        // cos = 0.99 / sqrt(0.99^2 + s^2) = 0.99 with s = sqrt(1 - 0.99^2)
        let s = (1.0f64 - 0.99 * 0.99).sqrt();
        let near = ev(&[0.99, s, 0.0, 0.0]);
        let next = p.process_batch(vec![ScoredEvent::new("n", near, 0.9)]);
        let o = &next.result.outcomes[0];
        assert!((o.theta_closest.unwrap() - 0.99).abs() < 1e-12);
        assert!((o.fp_confidence - 0.99).abs() < 1e-12);
        assert!((o.score_adjusted - 0.009).abs() < 1e-12);
        assert!(next.result.alerts.is_empty());
    }

    #[test]
    fn rejects_are_collected_per_event() {
        let p = pipeline();
        let b = p.process_batch(vec![ScoredEvent::new("seed", ev(&[1.0, 0.0, 0.0]), 0.9)]);
        p.annotate_from_outcome(b.result.batch_id, "seed", "x", None).unwrap();
        let r = p.process_batch(vec![
            ScoredEvent::new("ok", ev(&[0.0, 1.0, 0.0]), 0.9),
            ScoredEvent::new("short", ev(&[1.0, 0.0]), 0.9),
            ScoredEvent::new("big", ev(&[1.0, 0.0, 0.0]), 1.5),
            ScoredEvent::new("ok", ev(&[0.0, 0.0, 1.0]), 0.1),
        ]);
        assert_eq!(r.result.outcomes.len(), 1);
        assert_eq!(
            r.result.rejects,
            vec![
                Reject {
                    line: 2,
                    reason: RejectReason::DimensionMismatch
                },
                Reject {
                    line: 3,
                    reason: RejectReason::ScoreOutOfRange
                },
                Reject {
                    line: 4,
                    reason: RejectReason::DuplicateEventId
                },
            ]
        );
    }

    #[test]
    fn empty_store_takes_dimension_from_first_event() {
        let p = pipeline();
        let r = p.process_batch(vec![
            ScoredEvent::new("bad-score", ev(&[1.0]), 2.0),
            ScoredEvent::new("a", ev(&[1.0, 0.0]), 0.9),
            ScoredEvent::new("b", ev(&[1.0, 0.0, 0.0]), 0.9),
            ScoredEvent::new("c", ev(&[0.0, 1.0]), 0.9),
        ]);
        let ids: Vec<_> = r.result.outcomes.iter().map(|o| o.event_id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
        assert_eq!(
            r.result.rejects,
            vec![
                Reject {
                    line: 1,
                    reason: RejectReason::ScoreOutOfRange
                },
                Reject {
                    line: 3,
                    reason: RejectReason::DimensionMismatch
                },
            ]
        );
    }

    #[test]
    fn unknown_events_and_retention() {
        let store = Arc::new(FpStore::in_memory());
        let p = Pipeline::with_retention(store, cfg(), 2).unwrap();
        for i in 0..3 {
            p.process_batch(vec![ScoredEvent::new(format!("e{i}"), ev(&[1.0]), 0.9)]);
        }
        assert!(p.batch(0).is_none());
        assert!(p.batch(1).is_some());
        assert!(matches!(
            p.annotate_from_outcome(0, "e0", "x", None),
            Err(PipelineError::UnknownEvent { .. })
        ));
        assert!(matches!(
            p.annotate_from_outcome(2, "nope", "x", None),
            Err(PipelineError::UnknownEvent { .. })
        ));
        assert_eq!(p.latest_batch().unwrap().result.batch_id, 2);
        assert!(Pipeline::with_retention(Arc::new(FpStore::in_memory()), cfg(), 0).is_err());
    }

    #[test]
    fn config_change_applies_to_next_batch() {
        let p = pipeline();
        let e = || vec![ScoredEvent::new("e", ev(&[1.0, 0.0]), 0.6)];
        assert_eq!(p.process_batch(e()).result.alerts.len(), 1);
        p.set_config(AdjustmentConfig {
            alert_threshold: 0.7,
            ..cfg()
        })
        .unwrap();
        assert!(p.process_batch(e()).result.alerts.is_empty());
        assert!(p.set_config(AdjustmentConfig { tau: 1.2, ..cfg() }).is_err());
        assert_eq!(p.config().alert_threshold, 0.7);
    }

    #[test]
    fn evaluate_batch_is_deterministic() {
        let store = FpStore::in_memory();
        store
            .insert(NewAnnotation::now(ev(&[1.0, 0.2]), "a", "x", None))
            .unwrap();
        store
            .insert(NewAnnotation::now(ev(&[0.2, 1.0]), "b", "x", None))
            .unwrap();
        let state = store.snapshot();
        let events: Vec<_> = (0..50)
            .map(|i| {
                let t = f64::from(i) / 10.0;
                (
                    i as usize + 1,
                    ScoredEvent::new(format!("e{i}"), ev(&[t.cos(), t.sin()]), 0.8),
                )
            })
            .collect();
        let a = evaluate_batch(7, events.clone(), vec![], &cfg(), &state);
        let b = evaluate_batch(7, events, vec![], &cfg(), &state);
        assert_eq!(
            serde_json::to_vec(&a.result).unwrap(),
            serde_json::to_vec(&b.result).unwrap()
        );
    }
}
