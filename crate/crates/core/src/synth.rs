//! Synthetic feedback-loop experiments.
//!
//! A stand-in detector scores each event by its distance to the nearest
//! *learned* benign cluster center: `score = 1 - exp(-distance)`, or the raw
//! distance when scores are losses. Blind-spot clusters are benign behaviour
//! the detector never learned, so their events score high and show up as
//! false positives. Anomaly clusters score high and are true positives.
//!
//! [`run_feedback_loop`] plays analyst: after each round it annotates the
//! loudest remaining false positives and moves on to the next round.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::adjust::{AdjustmentConfig, ScoreKind};
use crate::diagnostics::{confusion_delta, ConfusionDelta};
use crate::embedding::EmbeddingVector;
use crate::error::{DiagnosticsError, PipelineError, SynthError};
use crate::pipeline::{Pipeline, ScoredEvent};
use crate::store::FpStore;

/// One Gaussian cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub center: Vec<f64>,
    /// Per-coordinate standard deviation.
    pub scale: f64,
    /// Relative share of events drawn from this cluster.
    pub weight: f64,
}

impl ClusterSpec {
    pub fn new(center: Vec<f64>, scale: f64, weight: f64) -> Self {
        Self { center, scale, weight }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    /// Benign behaviour the detector learned; scored low.
    pub benign: Vec<ClusterSpec>,
    /// Benign behaviour the detector did not learn; scored high.
    #[serde(default)]
    pub blind_spot: Vec<ClusterSpec>,
    #[serde(default)]
    pub anomaly: Vec<ClusterSpec>,
    pub events_per_round: usize,
    pub rounds: usize,
    pub annotation_budget: usize,
    pub seed: u64,
    #[serde(default)]
    pub draws: DrawMode,
}

/// How rounds relate to each other.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMode {
    /// Every round re-evaluates the same events (fresh event ids), so round
    /// to round changes come from the annotations alone.
    #[default]
    Replay,
    /// Every round draws new events.
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterKind {
    Benign,
    BlindSpot,
    Anomaly,
}

impl SyntheticSpec {
    /// Autoencoder-style setup in 6 dimensions: three learned benign
    /// clusters, one blind spot and one anomaly cluster orthogonal to it.
    pub fn zdt_like(seed: u64) -> Self {
        let axis = |i: usize, r: f64| {
            let mut v = vec![0.0; 6];
            v[i] = r;
            v
        };
        Self {
            dim: 6,
            benign: vec![
                ClusterSpec::new(axis(0, 5.0), 0.1, 0.25),
                ClusterSpec::new(axis(1, 5.0), 0.1, 0.25),
                ClusterSpec::new(axis(2, 5.0), 0.1, 0.2),
            ],
            blind_spot: vec![ClusterSpec::new(axis(3, 5.0), 0.6, 0.2)],
            anomaly: vec![ClusterSpec::new(axis(4, 5.0), 0.4, 0.1)],
            events_per_round: 1000,
            rounds: 5,
            annotation_budget: 20,
            seed,
            draws: DrawMode::Replay,
        }
    }

    /// Blind spot and anomaly clusters whose centers have cosine 0.9, wide
    /// enough that some anomalies fall near annotated false positives.
    pub fn overlapping(seed: u64) -> Self {
        let mut spec = Self::zdt_like(seed);
        let c = 0.9f64;
        let s = (1.0 - c * c).sqrt();
        spec.blind_spot = vec![ClusterSpec::new(vec![0.0, 0.0, 0.0, 5.0, 0.0, 0.0], 0.6, 0.2)];
        spec.anomaly = vec![ClusterSpec::new(vec![0.0, 0.0, 0.0, 5.0 * c, 5.0 * s, 0.0], 0.6, 0.1)];
        spec
    }

    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        let bad = |m: String| Err(DiagnosticsError::InvalidInput(m));
        if self.dim == 0 || self.events_per_round == 0 || self.rounds == 0 {
            return bad("dim, events_per_round and rounds must be positive".into());
        }
        if self.benign.is_empty() {
            return bad("at least one learned benign cluster is required".into());
        }
        let clusters = self.clusters();
        for (kind, c) in &clusters {
            if c.center.len() != self.dim {
                return bad(format!("{kind:?} cluster center has wrong dimension"));
            }
            if !(c.scale >= 0.0) || !(c.weight >= 0.0) || !c.scale.is_finite() || !c.weight.is_finite() {
                return bad(format!("{kind:?} cluster has invalid scale or weight"));
            }
        }
        if !(clusters.iter().map(|(_, c)| c.weight).sum::<f64>() > 0.0) {
            return bad("cluster weights sum to zero".into());
        }
        Ok(())
    }

    fn clusters(&self) -> Vec<(ClusterKind, &ClusterSpec)> {
        let benign = self.benign.iter().map(|c| (ClusterKind::Benign, c));
        let blind = self.blind_spot.iter().map(|c| (ClusterKind::BlindSpot, c));
        let anomaly = self.anomaly.iter().map(|c| (ClusterKind::Anomaly, c));
        benign.chain(blind).chain(anomaly).collect()
    }

    /// Distance from `point` to the nearest learned benign center.
    pub fn detector_distance(&self, point: &[f64]) -> f64 {
        self.benign
            .iter()
            .map(|c| {
                c.center
                    .iter()
                    .zip(point)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Events of one round with their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRound {
    pub events: Vec<ScoredEvent>,
    /// `true` for anomalies.
    pub truth: Vec<bool>,
    pub kinds: Vec<ClusterKind>,
}

/// Draws round `round_index`. Deterministic in `(spec, round_index, kind)`.
/// Event ids are `r{round}-e{n}`.
pub fn generate_round(
    spec: &SyntheticSpec,
    round_index: u64,
    kind: ScoreKind,
) -> Result<SyntheticRound, DiagnosticsError> {
    spec.validate()?;
    let clusters = spec.clusters();
    let weights = WeightedIndex::new(clusters.iter().map(|(_, c)| c.weight))
        .map_err(|e| DiagnosticsError::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.draws == DrawMode::Fresh {
        rng.set_stream(round_index);
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut out = SyntheticRound {
        events: Vec::with_capacity(spec.events_per_round),
        truth: Vec::with_capacity(spec.events_per_round),
        kinds: Vec::with_capacity(spec.events_per_round),
    };
    let mut i = 0usize;
    while out.events.len() < spec.events_per_round {
        let (cluster_kind, cluster) = clusters[weights.sample(&mut rng)];
        let point: Vec<f64> = cluster
            .center
            .iter()
            .map(|c| c + cluster.scale * unit.sample(&mut rng))
            .collect();
        i += 1;
        let distance = spec.detector_distance(&point);
        let Ok(embedding) = EmbeddingVector::new(point) else {
            continue;
        };
        let score = match kind {
            ScoreKind::Probability => 1.0 - (-distance).exp(),
            ScoreKind::Loss => distance,
        };
        out.events
            .push(ScoredEvent::new(format!("r{round_index}-e{}", i - 1), embedding, score));
        out.truth.push(cluster_kind == ClusterKind::Anomaly);
        out.kinds.push(cluster_kind);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub batch_id: u64,
    /// False positives after adjustment.
    pub fps: u64,
    /// True positives after adjustment.
    pub tps: u64,
    pub f1: f64,
    pub delta: ConfusionDelta,
    pub annotations_added: usize,
    pub cumulative_annotations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub spec: SyntheticSpec,
    pub config: AdjustmentConfig,
    pub rounds: Vec<RoundReport>,
    pub cumulative_delta_fp: i64,
    pub cumulative_delta_tp: i64,
}

impl FeedbackReport {
    /// True positives lost to suppression, summed over rounds.
    pub fn suppressed_tps(&self) -> u64 {
        self.rounds.iter().map(|r| (-r.delta.delta_tp).max(0) as u64).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// One row per round: `round,fps,tps,f1,cumulative_annotations`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,fps,tps,f1,cumulative_annotations\n");
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.round, r.fps, r.tps, r.f1, r.cumulative_annotations
            );
        }
        out
    }
}

/// Runs the rounds against a fresh in-memory store.
pub fn run_feedback_loop(spec: &SyntheticSpec, cfg: &AdjustmentConfig) -> Result<FeedbackReport, SynthError> {
    let store = Arc::new(FpStore::in_memory());
    let pipeline = Pipeline::new(store, *cfg).map_err(PipelineError::from)?;
    run_feedback_loop_with(spec, &pipeline)
}

/// Runs the rounds through an existing pipeline, using its live config.
pub fn run_feedback_loop_with(spec: &SyntheticSpec, pipeline: &Pipeline) -> Result<FeedbackReport, SynthError> {
    spec.validate()?;
    let cfg = pipeline.config();
    let mut rounds = Vec::with_capacity(spec.rounds);
    let mut cumulative = 0usize;
    for round in 0..spec.rounds {
        let generated = generate_round(spec, round as u64, cfg.score_kind)?;
        let batch = pipeline.process_batch(generated.events);
        let result = &batch.result;
        debug_assert!(result.rejects.is_empty());
        let before: Vec<f64> = result.outcomes.iter().map(|o| o.score_original).collect();
        let after: Vec<f64> = result.outcomes.iter().map(|o| o.score_adjusted).collect();
        let delta = confusion_delta(&generated.truth, &before, &after, batch.config.alert_threshold)?;

        let mut fps: Vec<usize> = (0..result.outcomes.len())
            .filter(|&i| !generated.truth[i] && batch.config.is_alert(after[i]))
            .collect();
        // loudest first; stable sort keeps input order among equal scores
        fps.sort_by(|&a, &b| after[b].total_cmp(&after[a]));
        let mut added = 0;
        for &i in fps.iter().take(spec.annotation_budget) {
            pipeline.annotate_from_outcome(result.batch_id, &result.outcomes[i].event_id, "synthbench", None)?;
            added += 1;
        }
        cumulative += added;

        rounds.push(RoundReport {
            round: round + 1,
            batch_id: result.batch_id,
            fps: delta.after.fp,
            tps: delta.after.tp,
            f1: delta.f1_new,
            delta,
            annotations_added: added,
            cumulative_annotations: cumulative,
        });
    }
    Ok(FeedbackReport {
        spec: spec.clone(),
        config: cfg,
        cumulative_delta_fp: rounds.iter().map(|r| r.delta.delta_fp).sum(),
        cumulative_delta_tp: rounds.iter().map(|r| r.delta.delta_tp).sum(),
        rounds,
    })
}
