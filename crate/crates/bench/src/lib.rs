//! Shared inputs for the benchmarks.

use std::collections::BTreeMap;

use melody_core::{Note, NoteId, Score};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A dense random score of `n` notes over `n / 4` beats.
pub fn random_score(n: usize, seed: u64) -> Score {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = (n / 4).max(1) as f64;
    let notes = (0..n as u32)
        .map(|i| {
            Note::new(
                i,
                rng.gen_range(36..=96),
                (rng.gen::<f64>() * span * 8.0).floor() / 8.0,
                rng.gen_range(1..=8) as f64 / 8.0,
            )
        })
        .collect();
    Score::new(notes, 480).expect("valid score")
}

pub fn random_probabilities(score: &Score, seed: u64) -> BTreeMap<NoteId, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    score.ids().map(|id| (id, rng.gen())).collect()
}
