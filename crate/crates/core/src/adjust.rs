//! Score adjustment by similarity to known false positives.
//!
//! Given the closest annotated mistake for an event (cosine similarity
//! `theta` and euclidean distance `d`), the event's score is discounted in
//! four steps:
//!
//! 1. `theta` is passed through a monomial curve `f(t) = t^alpha / tau^(alpha-1)`
//!    when it falls below the similarity threshold `tau`. The curve goes
//!    through `(0, 0)` and `(tau, tau)` and is flat near zero for large `alpha`.
//! 2. The optional distance threshold `delta` turns `d` into a factor
//!    `min(delta / d, 1)`.
//! 3. The product of the two is the false-positive confidence `fp_cs`.
//! 4. Probabilities are scaled by `1 - fp_cs`. Losses are scaled by a
//!    shifted sigmoid `1 - 1 / (1 + exp(alpha * (tau - fp_cs)))`.
//!
//! Everything here is pure and deterministic.

use serde::{Deserialize, Serialize};

use crate::error::AdjustError;
use crate::store::AnnotationId;

/// What an event's raw score means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Anomaly probability in `[0, 1]`.
    Probability,
    /// Unbounded non-negative loss, e.g. reconstruction error.
    Loss,
}

impl std::str::FromStr for ScoreKind {
    type Err = AdjustError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probability" => Ok(Self::Probability),
            "loss" => Ok(Self::Loss),
            other => Err(AdjustError::InvalidHyperparameter(format!(
                "unknown score kind {other:?}"
            ))),
        }
    }
}

/// Hyperparameters of the adjustment.
///
/// The canonical sharpness grid is `10, 20, ..., 100`, but any real
/// `alpha >= 1` is accepted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig")]
pub struct AdjustmentConfig {
    /// Cosine similarity threshold, in `(0, 1)`.
    pub tau: f64,
    /// Sharpness, `>= 1`.
    pub alpha: f64,
    /// Optional euclidean distance threshold, `> 0`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub score_kind: ScoreKind,
    /// Adjusted scores strictly above this raise an alert.
    pub alert_threshold: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    tau: f64,
    alpha: f64,
    #[serde(default)]
    delta: Option<f64>,
    score_kind: ScoreKind,
    alert_threshold: f64,
}

impl TryFrom<RawConfig> for AdjustmentConfig {
    type Error = AdjustError;

    fn try_from(raw: RawConfig) -> Result<Self, Self::Error> {
        let cfg = AdjustmentConfig {
            tau: raw.tau,
            alpha: raw.alpha,
            delta: raw.delta,
            score_kind: raw.score_kind,
            alert_threshold: raw.alert_threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for AdjustmentConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            alpha: 60.0,
            delta: None,
            score_kind: ScoreKind::Probability,
            alert_threshold: 0.5,
        }
    }
}

impl AdjustmentConfig {
    pub fn validate(&self) -> Result<(), AdjustError> {
        let bad = |msg: String| Err(AdjustError::InvalidHyperparameter(msg));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be a finite value >= 1, got {}", self.alpha));
        }
        if let Some(delta) = self.delta {
            if !(delta > 0.0) || !delta.is_finite() {
                return bad(format!("delta must be a finite value > 0, got {delta}"));
            }
        }
        if !(self.alert_threshold >= 0.0) || !self.alert_threshold.is_finite() {
            return bad(format!(
                "alert_threshold must be finite and >= 0, got {}",
                self.alert_threshold
            ));
        }
        if self.score_kind == ScoreKind::Probability && self.alert_threshold > 1.0 {
            return bad(format!(
                "alert_threshold must lie in [0, 1] for probabilities, got {}",
                self.alert_threshold
            ));
        }
        Ok(())
    }

    pub fn curve(&self) -> AdjustmentCurve {
        AdjustmentCurve {
            tau: self.tau,
            alpha: self.alpha,
        }
    }

    /// Whether a score raises an alert under this config.
    pub fn is_alert(&self, score: f64) -> bool {
        score > self.alert_threshold
    }
}

/// Closest stored annotation for a query embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub theta_closest: f64,
    pub d_closest: f64,
    pub annotation_id: AnnotationId,
}

/// Per-event explanation of an adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentOutcome {
    pub theta_adjusted: f64,
    pub d_adjusted: f64,
    pub fp_confidence: f64,
    pub score_original: f64,
    pub score_adjusted: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotation_id: Option<AnnotationId>,
}

/// The monomial `c * t^alpha` fitted by least squares through `(0, 0)` and
/// `(tau, tau)`. The fit has the closed form `c = tau^(1 - alpha)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjustmentCurve {
    tau: f64,
    alpha: f64,
}

impl AdjustmentCurve {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Evaluates the curve at `theta >= 0`.
    ///
    /// Computed as `tau * (theta / tau)^alpha`, which is algebraically equal
    /// to `theta^alpha / tau^(alpha - 1)` but cannot overflow in the
    /// denominator and hits `f(tau) = tau` exactly.
    pub fn eval(&self, theta: f64) -> f64 {
        debug_assert!(theta >= 0.0);
        self.tau * (theta / self.tau).powf(self.alpha)
    }
}

pub fn fit_adjustment_curve(tau: f64, alpha: f64) -> Result<AdjustmentCurve, AdjustError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(AdjustError::InvalidHyperparameter(format!(
            "tau must lie in (0, 1), got {tau}"
        )));
    }
    if !(alpha >= 1.0) || !alpha.is_finite() {
        return Err(AdjustError::InvalidHyperparameter(format!(
            "alpha must be a finite value >= 1, got {alpha}"
        )));
    }
    Ok(AdjustmentCurve { tau, alpha })
}

/// Similarity after the curve. Negative similarities carry no evidence and
/// are treated as zero.
pub fn adjusted_similarity(theta_closest: f64, cfg: &AdjustmentConfig) -> f64 {
    let theta = theta_closest.clamp(0.0, 1.0);
    if theta >= cfg.tau {
        theta
    } else {
        cfg.curve().eval(theta)
    }
}

/// `min(delta / d, 1)`, or `1` without a distance threshold. An exact hit
/// (`d == 0`) gives `1`.
pub fn distance_factor(d_closest: f64, delta: Option<f64>) -> f64 {
    match delta {
        None => 1.0,
        Some(_) if d_closest <= 0.0 => 1.0,
        Some(delta) => (delta / d_closest).min(1.0),
    }
}

pub fn fp_confidence(theta_adjusted: f64, d_adjusted: f64) -> f64 {
    (theta_adjusted * d_adjusted).clamp(0.0, 1.0)
}

fn check_fp_cs(fp_cs: f64) -> Result<(), AdjustError> {
    if !(0.0..=1.0).contains(&fp_cs) {
        return Err(AdjustError::DomainError(format!(
            "fp confidence must lie in [0, 1], got {fp_cs}"
        )));
    }
    Ok(())
}

pub fn adjust_probability(p_init: f64, fp_cs: f64) -> Result<f64, AdjustError> {
    if !(0.0..=1.0).contains(&p_init) {
        return Err(AdjustError::DomainError(format!(
            "probability must lie in [0, 1], got {p_init}"
        )));
    }
    check_fp_cs(fp_cs)?;
    Ok(p_init * (1.0 - fp_cs))
}

/// Loss multiplier `g(x) = 1 - 1 / (1 + exp(alpha * (tau - x)))`.
///
/// Evaluated as the logistic function of `alpha * (tau - x)` in whichever
/// form avoids overflow. Where the exact value is within half an ulp of 0 or
/// 1 the result is rounded into the open interval, so `g` never reports a
/// factor of exactly 0 or 1.
pub fn loss_factor(fp_cs: f64, tau: f64, alpha: f64) -> f64 {
    let z = alpha * (tau - fp_cs);
    let g = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
    g.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

pub fn adjust_loss(l_init: f64, fp_cs: f64, cfg: &AdjustmentConfig) -> Result<f64, AdjustError> {
    if !(l_init >= 0.0) || !l_init.is_finite() {
        return Err(AdjustError::DomainError(format!(
            "loss must be finite and >= 0, got {l_init}"
        )));
    }
    check_fp_cs(fp_cs)?;
    Ok(l_init * loss_factor(fp_cs, cfg.tau, cfg.alpha))
}

/// Checks a raw score against the range implied by `kind`.
pub fn validate_score(score: f64, kind: ScoreKind) -> Result<(), AdjustError> {
    let ok = match kind {
        ScoreKind::Probability => (0.0..=1.0).contains(&score),
        ScoreKind::Loss => score >= 0.0 && score.is_finite(),
    };
    if ok {
        Ok(())
    } else {
        Err(AdjustError::DomainError(format!(
            "score {score} out of range for {kind:?}"
        )))
    }
}

/// Full adjustment of one score given its closest match (if any).
///
/// Without a match the score passes through unchanged with zero confidence.
pub fn adjust_event(
    score: f64,
    matched: Option<&MatchResult>,
    cfg: &AdjustmentConfig,
) -> Result<AdjustmentOutcome, AdjustError> {
    validate_score(score, cfg.score_kind)?;
    let Some(m) = matched else {
        return Ok(AdjustmentOutcome {
            theta_adjusted: 0.0,
            d_adjusted: 1.0,
            fp_confidence: 0.0,
            score_original: score,
            score_adjusted: score,
            annotation_id: None,
        });
    };
    if !(-1.0..=1.0).contains(&m.theta_closest) {
        return Err(AdjustError::DomainError(format!(
            "cosine similarity must lie in [-1, 1], got {}",
            m.theta_closest
        )));
    }
    if !(m.d_closest >= 0.0) {
        return Err(AdjustError::DomainError(format!(
            "distance must be >= 0, got {}",
            m.d_closest
        )));
    }
    let theta_adjusted = adjusted_similarity(m.theta_closest, cfg);
    let d_adjusted = distance_factor(m.d_closest, cfg.delta);
    let fp_cs = fp_confidence(theta_adjusted, d_adjusted);
    let score_adjusted = match cfg.score_kind {
        ScoreKind::Probability => adjust_probability(score, fp_cs)?,
        ScoreKind::Loss => adjust_loss(score, fp_cs, cfg)?,
    };
    Ok(AdjustmentOutcome {
        theta_adjusted,
        d_adjusted,
        fp_confidence: fp_cs,
        score_original: score,
        score_adjusted,
        annotation_id: Some(m.annotation_id),
    })
}
