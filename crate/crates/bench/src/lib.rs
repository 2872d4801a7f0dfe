//! Deterministic fixtures shared by the benchmarks.

use std::sync::Arc;

use raad_core::{EmbeddingVector, FpStore, NewAnnotation, ScoredEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn embedding(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    let values = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    EmbeddingVector::new(values).expect("non-zero with overwhelming probability")
}

/// In-memory store of `n` random annotations.
pub fn store(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Arc<FpStore> {
    let store = FpStore::in_memory();
    for i in 0..n {
        store
            .insert(NewAnnotation::now(
                embedding(rng, dim),
                format!("seed-{i}"),
                "bench",
                None,
            ))
            .expect("same dimension");
    }
    Arc::new(store)
}

pub fn events(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<ScoredEvent> {
    (0..n)
        .map(|i| ScoredEvent::new(format!("evt-{i}"), embedding(rng, dim), rng.random_range(0.0..=1.0)))
        .collect()
}
