//! Synthetic annotated pieces whose melody is always the top voice.
//!
//! Each bar holds a sustained bass note and an Alberti-style eighth-note
//! figure on the chord built over it, all at or below MIDI 66. The melody is
//! a gapless random walk between 72 and 84, so it sounds above everything
//! else at every instant.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::score_io::{Note, NoteId, Score};

pub const TICKS_PER_BEAT: u16 = 480;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub bars: usize,
    pub beats_per_bar: usize,
    pub melody_low: u8,
    pub melody_high: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            bars: 4,
            beats_per_bar: 4,
            melody_low: 72,
            melody_high: 84,
        }
    }
}

const MELODY_DURATIONS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];
// low, high, middle, high
const ALBERTI: [u8; 4] = [12, 19, 16, 19];

/// One piece; the same seed always gives the same score.
pub fn synth_piece(seed: u64, config: &SynthConfig) -> Result<Score> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bar_len = config.beats_per_bar as f64;
    let total = config.bars as f64 * bar_len;
    let mut notes = Vec::new();
    let mut melody = Vec::new();
    let mut next_id = 0u32;
    let mut push = |notes: &mut Vec<Note>, pitch: u8, onset: f64, duration: f64| {
        notes.push(Note::new(next_id, pitch, onset, duration));
        next_id += 1;
        NoteId(next_id - 1)
    };

    for bar in 0..config.bars {
        let start = bar as f64 * bar_len;
        let root: u8 = rng.gen_range(36..=47);
        push(&mut notes, root, start, bar_len);
        for k in 0..config.beats_per_bar * 2 {
            let pitch = root + ALBERTI[k % ALBERTI.len()];
            push(&mut notes, pitch, start + k as f64 * 0.5, 0.5);
        }
    }

    let mut t = 0.0;
    let mut pitch: u8 = rng.gen_range(config.melody_low..=config.melody_high);
    while t < total {
        let d = MELODY_DURATIONS.choose(&mut rng).copied().unwrap_or(1.0).min(total - t);
        melody.push(push(&mut notes, pitch, t, d));
        t += d;
        let step: i32 = rng.gen_range(-4..=4);
        pitch = (pitch as i32 + step).clamp(config.melody_low as i32, config.melody_high as i32) as u8;
    }
    Score::new(notes, TICKS_PER_BEAT)?.with_melody_ids(melody.into_iter().collect())
}

/// `n` pieces named `synth_000`, `synth_001`, ..., seeded from `seed`.
pub fn synth_corpus(n: usize, seed: u64, config: &SynthConfig) -> Result<Vec<(String, Score)>> {
    (0..n)
        .map(|i| Ok((format!("synth_{i:03}"), synth_piece(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), config)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{is_monophonic, skyline};

    #[test]
    fn melody_is_the_skyline() {
        for (_, s) in synth_corpus(20, 3, &SynthConfig::default()).unwrap() {
            let truth = s.melody_ids().unwrap();
            assert_eq!(&skyline(&s), truth);
            assert!(is_monophonic(truth.iter().map(|id| s.note(*id).unwrap())));
            assert!((s.end() - 16.0).abs() < 1e-12);
            assert!(s.notes().iter().all(|n| truth.contains(&n.id) == (n.pitch >= 72)));
        }
    }

    #[test]
    fn reproducible() {
        let a = synth_piece(9, &SynthConfig::default()).unwrap();
        let b = synth_piece(9, &SynthConfig::default()).unwrap();
        assert_eq!(a.notes(), b.notes());
    }
}
