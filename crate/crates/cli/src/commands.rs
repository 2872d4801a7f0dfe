//! The CLI verbs other than `serve`. Each returns what it would print on
//! standard output so the binary stays a thin shell.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use raad_core::diagnostics::{confusion_delta, jaccard_separability, roc_auc, DiagnosticsReport, LabeledEmbeddingSet};
use raad_core::synth::{run_feedback_loop, FeedbackReport, SyntheticSpec};
use raad_core::wire::{self, LabeledLine};
use raad_core::{AnnotationId, FpStore, NewAnnotation, Pipeline, StoreError};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input or configuration. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Unreadable or unwritable file. Exit code 2.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::StorageFailure(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

/// Reads a file, or standard input for `-`.
pub fn read_input(path: &Path) -> Result<String, CliError> {
    let mut bytes = Vec::new();
    if path.as_os_str() == "-" {
        std::io::stdin()
            .read_to_end(&mut bytes)
            .map_err(|e| CliError::Io(format!("cannot read standard input: {e}")))?;
    } else {
        bytes = fs::read(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    }
    String::from_utf8(bytes).map_err(|_| CliError::Validation(format!("{} is not valid UTF-8", path.display())))
}

pub fn write_output(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn open_store(cfg: &ServiceConfig) -> Result<FpStore, CliError> {
    match &cfg.store {
        Some(path) => Ok(FpStore::open(path)?),
        None => Ok(FpStore::in_memory()),
    }
}

/// Scores an NDJSON body against the configured store and returns the
/// `BatchResult` as JSON. Rejected lines do not make this fail.
pub fn process(body: &str, cfg: &ServiceConfig) -> Result<String, CliError> {
    let store = Arc::new(open_store(cfg)?);
    let pipeline = Pipeline::new(store, cfg.adjustment).map_err(|e| CliError::Validation(e.to_string()))?;
    let batch = pipeline.process_ndjson(body);
    Ok(serde_json::to_string(&batch.result).expect("batch serialization cannot fail"))
}

#[derive(Debug, Serialize)]
struct Annotated {
    annotation_id: AnnotationId,
}

/// Stores the embedding of `event_id` from an NDJSON events body as a false
/// positive. Needs a store path, since an in-memory annotation would be lost.
pub fn annotate(
    body: &str,
    event_id: &str,
    annotator: &str,
    note: Option<String>,
    cfg: &ServiceConfig,
) -> Result<String, CliError> {
    if cfg.store.is_none() {
        return Err(CliError::Validation(
            "annotate needs --store or a store in the config file".into(),
        ));
    }
    let parsed = wire::parse_ndjson(body);
    let event = parsed
        .events
        .into_iter()
        .map(|(_, e)| e)
        .find(|e| e.event_id == event_id)
        .ok_or_else(|| CliError::Validation(format!("event {event_id:?} not found in input")))?;
    let store = open_store(cfg)?;
    let id = store.insert(NewAnnotation::now(event.embedding, event_id, annotator, note))?;
    Ok(serde_json::to_string(&Annotated { annotation_id: id }).expect("serialization cannot fail"))
}

/// Parses NDJSON `{embedding, label}` lines.
pub fn parse_labeled(text: &str) -> Result<LabeledEmbeddingSet, String> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: LabeledLine = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        points.push((parsed.embedding, parsed.label));
    }
    LabeledEmbeddingSet::new(points).map_err(|e| e.to_string())
}

/// Separability of a labeled set, with the anchor count defaulting to four
/// per class.
pub fn separability(
    data: &LabeledEmbeddingSet,
    anchors: Option<usize>,
    seed: u64,
) -> Result<DiagnosticsReport, String> {
    let m = anchors.unwrap_or_else(|| data.default_anchor_count());
    let jaccard = jaccard_separability(data, m, seed).map_err(|e| e.to_string())?;
    Ok(DiagnosticsReport::from_jaccard(&jaccard))
}

/// One line of an evaluation file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationLine {
    /// Whether the event is a real anomaly.
    pub truth: bool,
    pub score_original: f64,
    pub score_adjusted: f64,
}

pub fn diagnose(
    labeled: &str,
    evaluation: Option<&str>,
    anchors: Option<usize>,
    seed: u64,
    cfg: &ServiceConfig,
) -> Result<String, CliError> {
    let data = parse_labeled(labeled).map_err(CliError::Validation)?;
    let mut report = separability(&data, anchors.or(cfg.anchors), seed).map_err(CliError::Validation)?;
    if let Some(text) = evaluation {
        let mut truth = Vec::new();
        let mut before = Vec::new();
        let mut after = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: EvaluationLine = serde_json::from_str(line)
                .map_err(|e| CliError::Validation(format!("evaluation line {}: {e}", i + 1)))?;
            truth.push(e.truth);
            before.push(e.score_original);
            after.push(e.score_adjusted);
        }
        let delta = confusion_delta(&truth, &before, &after, cfg.adjustment.alert_threshold)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        // a single-class evaluation set has no AUC; the rest of the report stands
        let auc = roc_auc(&truth, &after).ok();
        report = report.with_evaluation(&delta, auc);
    }
    Ok(serde_json::to_string_pretty(&report).expect("report serialization cannot fail"))
}

/// Runs the synthetic feedback loop. `spec` is a JSON `SyntheticSpec`; the
/// ZDT-shaped preset with `seed` is used without one.
pub fn bench(spec: Option<&str>, seed: u64, cfg: &ServiceConfig) -> Result<FeedbackReport, CliError> {
    let spec = match spec {
        Some(text) => serde_json::from_str(text).map_err(|e| CliError::Validation(format!("bad spec: {e}")))?,
        None => SyntheticSpec::zdt_like(seed),
    };
    run_feedback_loop(&spec, &cfg.adjustment).map_err(|e| CliError::Validation(e.to_string()))
}
