//! Fixed-dimension embedding vectors and the two metrics used for matching.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::AdjustError;

/// Learned representation of one event.
///
/// Entries are finite, the dimension is at least one and the norm is
/// strictly positive. The norm is computed once at construction. Cloning is
/// cheap: the values are shared.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Arc<[f64]>,
    norm_sq: f64,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, AdjustError> {
        if values.is_empty() {
            return Err(AdjustError::InvalidEmbedding("empty vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AdjustError::InvalidEmbedding("non-finite entry"));
        }
        let norm_sq = dot(&values, &values);
        if !(norm_sq > 0.0) || !norm_sq.is_finite() {
            return Err(AdjustError::InvalidEmbedding("zero or overflowing norm"));
        }
        Ok(Self {
            values: values.into(),
            norm_sq,
            norm: norm_sq.sqrt(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn norm_squared(&self) -> f64 {
        self.norm_sq
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = AdjustError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values.to_vec()
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("EmbeddingVector").field(&&*self.values).finish()
    }
}

fn check_dims(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<(), AdjustError> {
    if u.dim() != v.dim() {
        return Err(AdjustError::DimensionMismatch {
            expected: u.dim(),
            actual: v.dim(),
        });
    }
    Ok(())
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        sum += x * y;
    }
    sum
}

/// `N` dot products against one shared row, each rounded exactly as
/// [`dot`] would round it. The row is read once instead of `N` times.
#[inline]
pub(crate) fn dot_n<const N: usize>(row: &[f64], q: [&[f64]; N]) -> [f64; N] {
    let n = row.len();
    debug_assert!(q.iter().all(|v| v.len() == n));
    let mut acc = [[0.0f64; 4]; N];
    let body = n - n % 4;
    let mut j = 0;
    while j < body {
        let r = &row[j..j + 4];
        for (a, v) in acc.iter_mut().zip(&q) {
            let v = &v[j..j + 4];
            a[0] += v[0] * r[0];
            a[1] += v[1] * r[1];
            a[2] += v[2] * r[2];
            a[3] += v[3] * r[3];
        }
        j += 4;
    }
    let mut out = [0.0; N];
    for ((o, a), v) in out.iter_mut().zip(&acc).zip(&q) {
        let mut sum = (a[0] + a[1]) + (a[2] + a[3]);
        for i in body..n {
            sum += v[i] * row[i];
        }
        *o = sum;
    }
    out
}

/// Cosine similarity, clamped to `[-1, 1]` to absorb rounding.
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, AdjustError> {
    check_dims(u, v)?;
    Ok(cosine_unchecked(u, v))
}

#[inline]
pub(crate) fn cosine_unchecked(u: &EmbeddingVector, v: &EmbeddingVector) -> f64 {
    cosine_from_parts(dot(u.values(), v.values()), u.norm_sq, v.norm_sq)
}

/// `dot / sqrt(|u|^2 |v|^2)`. Taking a single square root of the product
/// makes the similarity of a vector with itself exactly 1.
#[inline]
pub(crate) fn cosine_from_parts(dot: f64, u_norm_sq: f64, v_norm_sq: f64) -> f64 {
    let denom_sq = u_norm_sq * v_norm_sq;
    let denom = if denom_sq.is_normal() {
        denom_sq.sqrt()
    } else {
        u_norm_sq.sqrt() * v_norm_sq.sqrt()
    };
    (dot / denom).clamp(-1.0, 1.0)
}

/// Euclidean (L2) distance.
pub fn euclidean_distance(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, AdjustError> {
    check_dims(u, v)?;
    Ok(euclidean_unchecked(u, v))
}

#[inline]
pub(crate) fn euclidean_unchecked(u: &EmbeddingVector, v: &EmbeddingVector) -> f64 {
    u.values()
        .iter()
        .zip(v.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}
