//! Line-oriented input formats.
//!
//! Batches arrive as NDJSON, one event per line:
//!
//! ```json
//! {"event_id":"flow-17","embedding":[0.1,0.4,-0.2],"score":0.93,"occurred_at":"2024-05-01T12:00:00Z"}
//! ```
//!
//! Blank lines are ignored. A line that fails to parse is reported as a
//! reject with its 1-based line number and the rest of the body is still
//! processed.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::pipeline::{Reject, RejectReason, ScoredEvent};

#[derive(Debug, Serialize, Deserialize)]
struct WireEvent {
    event_id: String,
    embedding: Vec<f64>,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    occurred_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Default)]
pub struct ParsedBatch {
    pub events: Vec<(usize, ScoredEvent)>,
    pub rejects: Vec<Reject>,
}

pub fn parse_ndjson(body: &str) -> ParsedBatch {
    let mut out = ParsedBatch::default();
    for (i, line) in body.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match parse_event(line) {
            Ok(event) => out.events.push((line_no, event)),
            Err(reason) => out.rejects.push(Reject { line: line_no, reason }),
        }
    }
    out
}

pub fn parse_event(line: &str) -> Result<ScoredEvent, RejectReason> {
    let wire: WireEvent = serde_json::from_str(line).map_err(|_| RejectReason::InvalidJson)?;
    let embedding = EmbeddingVector::new(wire.embedding).map_err(|_| RejectReason::InvalidEmbedding)?;
    Ok(ScoredEvent {
        event_id: wire.event_id,
        embedding,
        score: wire.score,
        occurred_at: wire.occurred_at,
    })
}

pub fn event_to_json(event: &ScoredEvent) -> String {
    let wire = WireEvent {
        event_id: event.event_id.clone(),
        embedding: event.embedding.values().to_vec(),
        score: event.score,
        occurred_at: event.occurred_at,
    };
    serde_json::to_string(&wire).expect("event serialization cannot fail")
}

pub fn to_ndjson<'a>(events: impl IntoIterator<Item = &'a ScoredEvent>) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&event_to_json(e));
        out.push('\n');
    }
    out
}

/// One line of a labeled-embedding file: `{"embedding":[...],"label":"benign"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledLine {
    pub embedding: EmbeddingVector,
    pub label: String,
}
