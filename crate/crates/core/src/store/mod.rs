//! Store of annotated false-positive embeddings.
//!
//! Reads go through immutable [`StoreState`] snapshots: [`FpStore::snapshot`]
//! hands out an `Arc` to the current state, and every write builds a new
//! state and swaps it in. A batch that grabbed a snapshot keeps seeing exactly
//! that state no matter what is written afterwards, while new readers see the
//! write as soon as it returns.
//!
//! Nearest-neighbour search is an exact scan. Stores hold tens to thousands
//! of annotations, where a flat scan over a contiguous matrix beats any index.

mod snapshot;

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use snapshot::{StoreSnapshot, FORMAT_VERSION, MAGIC};

const QUERY_BLOCK: usize = 4;

// Norms inside this range keep every product in the scan normal and finite,
// which is what the prefilter's error bound assumes.
const PREFILTER_NORM_SQ: std::ops::RangeInclusive<f64> = 1e-200..=1e300;
// Bound on |key - theta * |q|| relative to |q|, with ample room for
// summation error up to very large dimensions.
const PREFILTER_SLACK: f64 = 1e-9;

use crate::adjust::MatchResult;
use crate::embedding::{cosine_from_parts, dot_n, euclidean_unchecked, EmbeddingVector};
use crate::error::StoreError;

/// Store-assigned annotation identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationId(pub u64);

impl fmt::Display for AnnotationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    FalsePositive,
}

/// One human-confirmed mistake.
#[derive(Debug, Clone, PartialEq)]
pub struct FpAnnotation {
    pub id: AnnotationId,
    pub embedding: EmbeddingVector,
    pub label: Label,
    pub source_event_id: String,
    pub annotator: String,
    pub created_at: DateTime<Utc>,
    pub note: Option<String>,
}

/// Everything about an annotation except the id, which the store assigns.
#[derive(Debug, Clone)]
pub struct NewAnnotation {
    pub embedding: EmbeddingVector,
    pub source_event_id: String,
    pub annotator: String,
    pub note: Option<String>,
    pub created_at: DateTime<Utc>,
}

impl NewAnnotation {
    pub fn now(
        embedding: EmbeddingVector,
        source_event_id: impl Into<String>,
        annotator: impl Into<String>,
        note: Option<String>,
    ) -> Self {
        Self {
            embedding,
            source_event_id: source_event_id.into(),
            annotator: annotator.into(),
            note,
            created_at: Utc::now(),
        }
    }
}

/// Immutable view of the store at one generation.
#[derive(Debug, Default)]
pub struct StoreState {
    generation: u64,
    dim: Option<usize>,
    next_id: u64,
    annotations: Vec<Arc<FpAnnotation>>,
    // row-major copy of the embeddings, one row per annotation in id order
    matrix: Vec<f64>,
    norms_sq: Vec<f64>,
    inv_norms: Vec<f64>,
    prefilter: bool,
}

impl StoreState {
    fn from_annotations(
        generation: u64,
        dim: Option<usize>,
        next_id: u64,
        annotations: Vec<Arc<FpAnnotation>>,
    ) -> Self {
        let width = dim.unwrap_or(0);
        let mut matrix = Vec::with_capacity(annotations.len() * width);
        let mut norms_sq = Vec::with_capacity(annotations.len());
        let mut inv_norms = Vec::with_capacity(annotations.len());
        for a in &annotations {
            matrix.extend_from_slice(a.embedding.values());
            norms_sq.push(a.embedding.norm_squared());
            inv_norms.push(a.embedding.norm().recip());
        }
        let prefilter = norms_sq.iter().all(|n| PREFILTER_NORM_SQ.contains(n));
        Self {
            generation,
            dim,
            next_id,
            annotations,
            matrix,
            norms_sq,
            inv_norms,
            prefilter,
        }
    }

    /// Bumped on every successful write.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn annotations(&self) -> impl ExactSizeIterator<Item = &FpAnnotation> {
        self.annotations.iter().map(|a| a.as_ref())
    }

    pub fn get(&self, id: AnnotationId) -> Option<&FpAnnotation> {
        self.position(id).map(|i| self.annotations[i].as_ref())
    }

    pub fn contains(&self, id: AnnotationId) -> bool {
        self.position(id).is_some()
    }

    fn position(&self, id: AnnotationId) -> Option<usize> {
        self.annotations.binary_search_by_key(&id, |a| a.id).ok()
    }

    fn check_dim(&self, query: &EmbeddingVector) -> Result<(), StoreError> {
        match self.dim {
            Some(dim) if dim != query.dim() => Err(StoreError::DimensionMismatch {
                expected: dim,
                actual: query.dim(),
            }),
            _ => Ok(()),
        }
    }

    /// Closest annotation by cosine similarity. Ties go to the lowest id.
    /// `None` when the store is empty.
    pub fn nearest(&self, query: &EmbeddingVector) -> Result<Option<MatchResult>, StoreError> {
        self.check_dim(query)?;
        Ok(self.nearest_unchecked(query))
    }

    fn nearest_unchecked(&self, query: &EmbeddingVector) -> Option<MatchResult> {
        let [m] = self.scan([query]);
        m
    }

    /// Exact scan for `N` queries at once.
    ///
    /// `dot / |r|` is a cheap stand-in for `theta * |q|`. A row whose key
    /// falls clearly below the current best cannot match or beat it, so the
    /// exact similarity is only computed for rows that might. Winners are
    /// always decided on the exact value, so the result is identical to a
    /// plain scan.
    fn scan<const N: usize>(&self, qs: [&EmbeddingVector; N]) -> [Option<MatchResult>; N] {
        let Some(dim) = self.dim else {
            return [None; N];
        };
        let qn = qs.map(|q| q.norm_squared());
        let fast = self.prefilter && qn.iter().all(|n| PREFILTER_NORM_SQ.contains(n));
        let slack = qs.map(|q| PREFILTER_SLACK * q.norm());
        let mut best = [usize::MAX; N];
        let mut best_theta = [f64::NEG_INFINITY; N];
        let mut best_key = [f64::NEG_INFINITY; N];
        let rows = self
            .matrix
            .chunks_exact(dim)
            .zip(self.norms_sq.iter().zip(&self.inv_norms));
        for (i, (row, (&norm_sq, &inv_norm))) in rows.enumerate() {
            let dots = dot_n(row, qs.map(|q| q.values()));
            for k in 0..N {
                let key = dots[k] * inv_norm;
                if fast && key < best_key[k] - slack[k] {
                    continue;
                }
                // same expression as `cosine_similarity(query, annotation)`
                let theta = cosine_from_parts(dots[k], qn[k], norm_sq);
                if theta > best_theta[k] {
                    best_theta[k] = theta;
                    best_key[k] = key;
                    best[k] = i;
                }
            }
        }
        std::array::from_fn(|k| {
            let matched = self.annotations.get(best[k])?;
            Some(MatchResult {
                theta_closest: best_theta[k],
                d_closest: euclidean_unchecked(qs[k], &matched.embedding),
                annotation_id: matched.id,
            })
        })
    }

    /// Like [`nearest_batch`](Self::nearest_batch) for queries already
    /// checked against the store's dimension.
    pub(crate) fn nearest_many(&self, queries: &[&EmbeddingVector]) -> Vec<Option<MatchResult>> {
        queries
            .par_chunks(QUERY_BLOCK)
            .flat_map_iter(|block| match *block {
                [a, b, c, d] => self.scan([a, b, c, d]).to_vec(),
                _ => block.iter().map(|q| self.nearest_unchecked(q)).collect(),
            })
            .collect()
    }

    /// [`nearest`](Self::nearest) over a batch, data-parallel, order preserved.
    pub fn nearest_batch(&self, queries: &[EmbeddingVector]) -> Result<Vec<Option<MatchResult>>, StoreError> {
        if let Some(dim) = self.dim {
            if let Some(index) = queries.iter().position(|q| q.dim() != dim) {
                return Err(StoreError::BatchDimensionMismatch {
                    index,
                    expected: dim,
                    actual: queries[index].dim(),
                });
            }
        }
        Ok(self.nearest_many(&queries.iter().collect::<Vec<_>>()))
    }

    pub fn to_snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            format_version: FORMAT_VERSION,
            dim: self.dim,
            annotations: self.annotations().cloned().collect(),
        }
    }
}

/// Persistent false-positive store.
///
/// When opened with a path, every write is flushed to a snapshot file before
/// it becomes visible; a failed flush leaves the store unchanged.
pub struct FpStore {
    state: RwLock<Arc<StoreState>>,
    writer: Mutex<()>,
    path: Option<PathBuf>,
}

impl fmt::Debug for FpStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let state = self.snapshot();
        f.debug_struct("FpStore")
            .field("path", &self.path)
            .field("generation", &state.generation)
            .field("len", &state.len())
            .field("dim", &state.dim)
            .finish()
    }
}

impl Default for FpStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl FpStore {
    pub fn in_memory() -> Self {
        Self {
            state: RwLock::new(Arc::new(StoreState {
                next_id: 1,
                ..StoreState::default()
            })),
            writer: Mutex::new(()),
            path: None,
        }
    }

    /// Opens a store persisted at `path`, loading it when the file exists.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let state = match File::open(&path) {
            Ok(file) => state_from_snapshot(read_snapshot(file)?, 0),
            Err(e) if e.kind() == io::ErrorKind::NotFound => StoreState {
                next_id: 1,
                ..StoreState::default()
            },
            Err(e) => return Err(StoreError::StorageFailure(e)),
        };
        Ok(Self {
            state: RwLock::new(Arc::new(state)),
            writer: Mutex::new(()),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// The current state. Holding on to it pins that generation.
    pub fn snapshot(&self) -> Arc<StoreState> {
        Arc::clone(&self.state.read())
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshot().is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.snapshot().dim
    }

    pub fn generation(&self) -> u64 {
        self.snapshot().generation
    }

    pub fn nearest(&self, query: &EmbeddingVector) -> Result<Option<MatchResult>, StoreError> {
        self.snapshot().nearest(query)
    }

    pub fn nearest_batch(&self, queries: &[EmbeddingVector]) -> Result<Vec<Option<MatchResult>>, StoreError> {
        self.snapshot().nearest_batch(queries)
    }

    /// Records an annotation and returns its id. The first insert fixes the
    /// store's dimension.
    pub fn insert(&self, new: NewAnnotation) -> Result<AnnotationId, StoreError> {
        let _guard = self.writer.lock();
        let current = self.snapshot();
        let dim = new.embedding.dim();
        if let Some(expected) = current.dim {
            if expected != dim {
                return Err(StoreError::DimensionMismatch { expected, actual: dim });
            }
        }
        let id = AnnotationId(current.next_id);
        let mut annotations = current.annotations.clone();
        annotations.push(Arc::new(FpAnnotation {
            id,
            embedding: new.embedding,
            label: Label::FalsePositive,
            source_event_id: new.source_event_id,
            annotator: new.annotator,
            created_at: snapshot::truncate_to_millis(new.created_at),
            note: new.note,
        }));
        let next = StoreState::from_annotations(current.generation + 1, Some(dim), current.next_id + 1, annotations);
        self.commit(next)?;
        Ok(id)
    }

    /// Deletes an annotation. Returns whether it existed.
    pub fn remove(&self, id: AnnotationId) -> Result<bool, StoreError> {
        let _guard = self.writer.lock();
        let current = self.snapshot();
        let Some(pos) = current.position(id) else {
            return Ok(false);
        };
        let mut annotations = current.annotations.clone();
        annotations.remove(pos);
        let next = StoreState::from_annotations(current.generation + 1, current.dim, current.next_id, annotations);
        self.commit(next)?;
        Ok(true)
    }

    fn commit(&self, next: StoreState) -> Result<(), StoreError> {
        if let Some(path) = &self.path {
            write_atomically(path, &next.to_snapshot())?;
        }
        *self.state.write() = Arc::new(next);
        Ok(())
    }

    pub fn save_snapshot(&self, destination: impl AsRef<Path>) -> Result<(), StoreError> {
        write_atomically(destination.as_ref(), &self.snapshot().to_snapshot())
    }

    /// Replaces the store contents with a snapshot file. On any error the
    /// store is left untouched.
    pub fn load_snapshot(&self, source: impl AsRef<Path>) -> Result<(), StoreError> {
        let snap = read_snapshot(File::open(source.as_ref())?)?;
        let _guard = self.writer.lock();
        let generation = self.snapshot().generation + 1;
        let next = state_from_snapshot(snap, generation);
        self.commit(next)
    }
}

fn read_snapshot(file: File) -> Result<StoreSnapshot, StoreError> {
    StoreSnapshot::read_from(&mut BufReader::new(file))
}

fn state_from_snapshot(snap: StoreSnapshot, generation: u64) -> StoreState {
    let next_id = snap.annotations.last().map_or(1, |a| a.id.0 + 1);
    let annotations = snap.annotations.into_iter().map(Arc::new).collect();
    StoreState::from_annotations(generation, snap.dim, next_id, annotations)
}

fn write_atomically(path: &Path, snap: &StoreSnapshot) -> Result<(), StoreError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "snapshot path has no file name"))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = dir.join(tmp_name);
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        snap.write_to(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        drop(w);
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(StoreError::StorageFailure)
}
