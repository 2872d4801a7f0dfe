//! Separability gate and evaluation metrics.
//!
//! The separability check quantizes the embedding space with k-means anchors
//! and treats each class as the set of anchor cells its points occupy. The
//! Jaccard index between two classes is then plain set overlap. A maximum
//! pairwise index around or below 10% indicates an embedding space where
//! similarity to past mistakes is a usable signal.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::DiagnosticsError;

/// Maximum pairwise Jaccard index above which the separability warning fires.
pub const JACCARD_ADVISORY_THRESHOLD: f64 = 0.10;

/// Lloyd iterations for the anchor quantization.
pub const KMEANS_MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Default)]
pub struct LabeledEmbeddingSet {
    points: Vec<(EmbeddingVector, String)>,
}

impl LabeledEmbeddingSet {
    pub fn new(points: Vec<(EmbeddingVector, String)>) -> Result<Self, DiagnosticsError> {
        if let Some((first, _)) = points.first() {
            let dim = first.dim();
            if let Some(i) = points.iter().position(|(e, _)| e.dim() != dim) {
                return Err(DiagnosticsError::InvalidInput(format!(
                    "point {i} has dim {}, expected {dim}",
                    points[i].0.dim()
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(EmbeddingVector, String)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distinct labels in sorted order.
    pub fn labels(&self) -> Vec<String> {
        self.points
            .iter()
            .map(|(_, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Anchor count used when none is configured: four per class.
    pub fn default_anchor_count(&self) -> usize {
        4 * self.labels().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaccardPair {
    pub a: String,
    pub b: String,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JaccardReport {
    /// Class labels in sorted order; indexes `matrix`.
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub pairs: Vec<JaccardPair>,
    pub max: f64,
    /// Final anchor positions.
    pub anchors: Vec<Vec<f64>>,
}

impl JaccardReport {
    pub fn exceeds_advisory(&self) -> bool {
        self.max > JACCARD_ADVISORY_THRESHOLD
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest anchor; ties go to the lowest index.
pub fn nearest_anchor(point: &[f64], anchors: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, a) in anchors.iter().enumerate() {
        let d = sq_dist(point, a);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Seeded k-means++ followed by Lloyd iterations. Stops early when no
/// assignment changes. Fewer than `m` anchors are returned when the data has
/// fewer distinct points.
pub fn kmeans(points: &[&[f64]], m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let mut anchors: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    let mut closest: Vec<f64> = points.iter().map(|p| sq_dist(p, &anchors[0])).collect();
    while anchors.len() < m {
        let total: f64 = closest.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = n - 1;
        for (i, d) in closest.iter().enumerate() {
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        // never re-pick a point that already coincides with an anchor
        if closest[pick] == 0.0 {
            pick = closest
                .iter()
                .rposition(|d| *d > 0.0)
                .expect("total > 0 implies a positive entry");
        }
        let anchor = points[pick].to_vec();
        for (c, p) in closest.iter_mut().zip(points) {
            *c = c.min(sq_dist(p, &anchor));
        }
        anchors.push(anchor);
    }

    let dim = points[0].len();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let k = nearest_anchor(p, &anchors);
            if assignment[i] != k {
                assignment[i] = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; anchors.len()];
        let mut counts = vec![0usize; anchors.len()];
        for (p, &k) in points.iter().zip(&assignment) {
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for ((anchor, sum), count) in anchors.iter_mut().zip(sums).zip(counts) {
            if count > 0 {
                *anchor = sum.into_iter().map(|s| s / count as f64).collect();
            }
        }
    }
    anchors
}

/// Pairwise Jaccard indices of class-occupied anchor cells.
///
/// Points are put in a canonical order before clustering, so the result does
/// not depend on input order.
pub fn jaccard_separability(
    data: &LabeledEmbeddingSet,
    anchors: usize,
    seed: u64,
) -> Result<JaccardReport, DiagnosticsError> {
    if anchors < 2 {
        return Err(DiagnosticsError::InvalidInput(format!(
            "need at least 2 anchors, got {anchors}"
        )));
    }
    let labels = data.labels();
    if labels.len() < 2 {
        return Err(DiagnosticsError::InvalidInput(
            "separability needs at least two classes".into(),
        ));
    }
    let mut order: Vec<&(EmbeddingVector, String)> = data.points.iter().collect();
    order.sort_by(|(a, la), (b, lb)| {
        let ka = a.values().iter().map(|v| v.to_bits());
        let kb = b.values().iter().map(|v| v.to_bits());
        ka.cmp(kb).then_with(|| la.cmp(lb))
    });
    let first = order[0].0.values();
    if order.iter().all(|(e, _)| e.values() == first) {
        return Err(DiagnosticsError::DegenerateData("all points are identical".into()));
    }

    let points: Vec<&[f64]> = order.iter().map(|(e, _)| e.values()).collect();
    let centers = kmeans(&points, anchors, seed);

    let mut cells: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); labels.len()];
    for (p, (_, label)) in points.iter().zip(&order) {
        let class = labels.binary_search(label).expect("label collected above");
        cells[class].insert(nearest_anchor(p, &centers));
    }

    let n = labels.len();
    let mut matrix = vec![vec![0.0; n]; n];
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    let mut max = 0.0f64;
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in i + 1..n {
            let inter = cells[i].intersection(&cells[j]).count();
            let union = cells[i].union(&cells[j]).count();
            let jac = inter as f64 / union as f64;
            matrix[i][j] = jac;
            matrix[j][i] = jac;
            max = max.max(jac);
            pairs.push(JaccardPair {
                a: labels[i].clone(),
                b: labels[j].clone(),
                jaccard: jac,
            });
        }
    }

    Ok(JaccardReport {
        labels,
        matrix,
        pairs,
        max,
        anchors: centers,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    /// Counts predictions `score > threshold` against binary truth.
    pub fn tally(truth: &[bool], scores: &[f64], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&t, &s) in truth.iter().zip(scores) {
            match (t, s > threshold) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `2TP / (2TP + FP + FN)`, zero when nothing is positive.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionDelta {
    pub before: Confusion,
    pub after: Confusion,
    pub f1_orig: f64,
    pub f1_new: f64,
    pub delta_fp: i64,
    pub delta_tp: i64,
}

pub fn confusion_delta(
    truth: &[bool],
    scores_before: &[f64],
    scores_after: &[f64],
    alert_threshold: f64,
) -> Result<ConfusionDelta, DiagnosticsError> {
    if truth.len() != scores_before.len() || truth.len() != scores_after.len() {
        return Err(DiagnosticsError::LengthMismatch(format!(
            "truth {}, before {}, after {}",
            truth.len(),
            scores_before.len(),
            scores_after.len()
        )));
    }
    let before = Confusion::tally(truth, scores_before, alert_threshold);
    let after = Confusion::tally(truth, scores_after, alert_threshold);
    Ok(ConfusionDelta {
        before,
        after,
        f1_orig: before.f1(),
        f1_new: after.f1(),
        delta_fp: after.fp as i64 - before.fp as i64,
        delta_tp: after.tp as i64 - before.tp as i64,
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks in `O(n log n)`.
pub fn roc_auc(truth: &[bool], scores: &[f64]) -> Result<f64, DiagnosticsError> {
    if truth.len() != scores.len() {
        return Err(DiagnosticsError::LengthMismatch(format!(
            "truth {}, scores {}",
            truth.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DiagnosticsError::InvalidInput("NaN score".into()));
    }
    let positives = truth.iter().filter(|t| **t).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(DiagnosticsError::SingleClass);
    }

    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based ranks of positives, with tied groups sharing their mean rank
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| truth[k]).count();
        rank_sum += mean_rank * pos_in_group as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// JSON report shared by the CLI and HTTP surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub jaccard_max: f64,
    pub jaccard_pairs: Vec<JaccardPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1_orig: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1_new: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_fp: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_tp: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps_orig: Option<u64>,
    /// AUC of the adjusted scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DiagnosticsReport {
    pub fn from_jaccard(jaccard: &JaccardReport) -> Self {
        let mut warnings = Vec::new();
        if jaccard.exceeds_advisory() {
            warnings.push(format!(
                "max pairwise Jaccard index {:.3} exceeds {:.2}: embedding classes overlap, suppression may hit true positives",
                jaccard.max, JACCARD_ADVISORY_THRESHOLD
            ));
        }
        Self {
            jaccard_max: jaccard.max,
            jaccard_pairs: jaccard.pairs.clone(),
            f1_orig: None,
            f1_new: None,
            delta_fp: None,
            delta_tp: None,
            fps_orig: None,
            auc: None,
            warnings,
        }
    }

    pub fn with_evaluation(mut self, delta: &ConfusionDelta, auc: Option<f64>) -> Self {
        self.f1_orig = Some(delta.f1_orig);
        self.f1_new = Some(delta.f1_new);
        self.delta_fp = Some(delta.delta_fp);
        self.delta_tp = Some(delta.delta_tp);
        self.fps_orig = Some(delta.before.fp);
        self.auc = auc;
        self
    }
}
