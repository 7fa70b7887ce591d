//! Skyline and contig-style voice separation baselines.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::evaluation::Prf;
use crate::score_io::{Note, NoteId, Score};

/// Notes with no strictly higher note sounding at their onset. Of several
/// equal-pitch notes starting together only the lowest id is kept.
pub fn skyline(score: &Score) -> BTreeSet<NoteId> {
    let notes = score.notes();
    let mut out = BTreeSet::new();
    for n in notes {
        // notes are onset-sorted; only earlier or simultaneous ones can sound at n.onset
        let shadowed = notes
            .iter()
            .take_while(|m| m.onset <= n.onset)
            .filter(|m| m.end() > n.onset && m.id != n.id)
            .any(|m| m.pitch > n.pitch || (m.pitch == n.pitch && m.onset == n.onset && m.id < n.id));
        if !shadowed {
            out.insert(n.id);
        }
    }
    out
}

/// A stretch of time over which the same notes sound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub sounding: Vec<NoteId>,
}

/// Splits `[0, score end)` at every onset and end time.
pub fn segment(score: &Score) -> Vec<Segment> {
    let mut bounds: Vec<f64> = std::iter::once(0.0)
        .chain(score.notes().iter().flat_map(|n| [n.onset, n.end()]))
        .collect();
    bounds.sort_by(f64::total_cmp);
    bounds.dedup();
    bounds
        .windows(2)
        .map(|w| Segment {
            start: w[0],
            end: w[1],
            sounding: score
                .notes()
                .iter()
                .filter(|n| n.onset <= w[0] && n.end() >= w[1])
                .map(|n| n.id)
                .collect(),
        })
        .collect()
}

/// Highest number of simultaneously sounding notes.
pub fn voice_count(segments: &[Segment]) -> usize {
    segments.iter().map(|s| s.sounding.len()).max().unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Voice {
    pub index: usize,
    pub notes: Vec<NoteId>,
}

/// Assignment cost of a note entering a slot that has never held a note.
pub const FRESH_SLOT_COST: u32 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VosaConfig {
    /// Largest number of entering notes searched exhaustively; above it a
    /// greedy cheapest-pair-first assignment is used.
    pub exhaustive_limit: usize,
}

impl Default for VosaConfig {
    fn default() -> Self {
        VosaConfig { exhaustive_limit: 6 }
    }
}

fn cost(pitch: u8, last: Option<u8>) -> u32 {
    last.map_or(FRESH_SLOT_COST, |l| (pitch as i32 - l as i32).unsigned_abs())
}

/// Total cost of putting `entering[i]` (pitches) into `slots[i]`.
pub fn assignment_cost(entering: &[u8], slots: &[usize], last_pitch: &[Option<u8>]) -> u32 {
    entering.iter().zip(slots).map(|(&p, &s)| cost(p, last_pitch[s])).sum()
}

/// Chooses a distinct free slot for each entering pitch, minimizing
/// [`assignment_cost`]. Exhaustive search returns the lexicographically
/// smallest optimal slot tuple, so pass `entering` in descending pitch order
/// for a top-down layout on ties.
pub fn assign_slots(entering: &[u8], free: &[usize], last_pitch: &[Option<u8>], config: &VosaConfig) -> Vec<usize> {
    assert!(entering.len() <= free.len(), "more entering notes than free slots");
    let mut free = free.to_vec();
    free.sort_unstable();
    if entering.len() <= config.exhaustive_limit {
        let mut best: Option<(u32, Vec<usize>)> = None;
        let mut current = Vec::with_capacity(entering.len());
        let mut used = vec![false; free.len()];
        search(entering, &free, last_pitch, &mut used, &mut current, 0, &mut best);
        best.map(|(_, s)| s).unwrap_or_default()
    } else {
        greedy(entering, &free, last_pitch)
    }
}

fn search(
    entering: &[u8],
    free: &[usize],
    last: &[Option<u8>],
    used: &mut [bool],
    current: &mut Vec<usize>,
    acc: u32,
    best: &mut Option<(u32, Vec<usize>)>,
) {
    let i = current.len();
    if i == entering.len() {
        if best.as_ref().map_or(true, |(b, _)| acc < *b) {
            *best = Some((acc, current.clone()));
        }
        return;
    }
    if let Some((b, _)) = best {
        // tuples are visited in lexicographic order, so an equal bound cannot win
        let bound: u32 = entering[i..]
            .iter()
            .map(|&p| (0..free.len()).filter(|&k| !used[k]).map(|k| cost(p, last[free[k]])).min().unwrap_or(0))
            .sum();
        if acc + bound >= *b {
            return;
        }
    }
    for k in 0..free.len() {
        // an unused earlier slot with the same history gives the same cost
        // and a lexicographically smaller tuple
        if used[k] || (0..k).any(|j| !used[j] && last[free[j]] == last[free[k]]) {
            continue;
        }
        used[k] = true;
        current.push(free[k]);
        search(entering, free, last, used, current, acc + cost(entering[i], last[free[k]]), best);
        current.pop();
        used[k] = false;
    }
}

fn greedy(entering: &[u8], free: &[usize], last: &[Option<u8>]) -> Vec<usize> {
    let mut out = vec![usize::MAX; entering.len()];
    let mut slot_taken = vec![false; free.len()];
    for _ in 0..entering.len() {
        let (i, k) = (0..entering.len())
            .filter(|&i| out[i] == usize::MAX)
            .flat_map(|i| (0..free.len()).filter(|&k| !slot_taken[k]).map(move |k| (i, k)))
            .min_by_key(|&(i, k)| (cost(entering[i], last[free[k]]), i, k))
            .expect("a free slot remains");
        out[i] = free[k];
        slot_taken[k] = true;
    }
    out
}

/// One slot decision made while separating voices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentStep {
    pub segment: usize,
    /// Entering notes, in descending pitch order.
    pub entering: Vec<(NoteId, u8)>,
    pub free: Vec<usize>,
    /// Pitch of the latest note in each slot before this segment.
    pub last_pitch: Vec<Option<u8>>,
    pub chosen: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Separation {
    pub segments: Vec<Segment>,
    pub voices: Vec<Voice>,
    pub steps: Vec<AssignmentStep>,
}

/// Voice separation with the full decision trace.
///
/// The piece is cut into constant-count segments and the voice count is the
/// maximum concurrency. Walking the segments in order, sounding notes keep
/// their slot and newly entering notes take free slots chosen by
/// [`assign_slots`], the cost being the pitch interval to the previous note
/// in the slot.
pub fn vosa_separate(score: &Score, config: &VosaConfig) -> Separation {
    let segments = segment(score);
    let v = voice_count(&segments);
    let mut slot_of: std::collections::HashMap<NoteId, usize> = Default::default();
    let mut occupant: Vec<Option<NoteId>> = vec![None; v];
    let mut last_pitch: Vec<Option<u8>> = vec![None; v];
    let mut voices: Vec<Voice> = (0..v).map(|index| Voice { index, notes: Vec::new() }).collect();
    let mut steps = Vec::new();
    let pitch = |id: NoteId| score.note(id).expect("segment ids come from the score").pitch;

    for (si, seg) in segments.iter().enumerate() {
        let sounding: BTreeSet<NoteId> = seg.sounding.iter().copied().collect();
        for o in occupant.iter_mut() {
            if o.is_some_and(|id| !sounding.contains(&id)) {
                *o = None;
            }
        }
        let mut entering: Vec<(NoteId, u8)> = seg
            .sounding
            .iter()
            .filter(|id| !slot_of.contains_key(id))
            .map(|&id| (id, pitch(id)))
            .collect();
        if entering.is_empty() {
            continue;
        }
        entering.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let free: Vec<usize> = (0..v).filter(|&s| occupant[s].is_none()).collect();
        let pitches: Vec<u8> = entering.iter().map(|e| e.1).collect();
        let chosen = assign_slots(&pitches, &free, &last_pitch, config);
        let before = last_pitch.clone();
        for (&(id, p), &s) in entering.iter().zip(&chosen) {
            slot_of.insert(id, s);
            occupant[s] = Some(id);
            last_pitch[s] = Some(p);
            voices[s].notes.push(id);
        }
        steps.push(AssignmentStep {
            segment: si,
            entering,
            free,
            last_pitch: before,
            chosen,
        });
    }
    Separation {
        segments,
        voices,
        steps,
    }
}

/// Voices of `score`, top voice first where the assignment allows.
pub fn vosa_voices(score: &Score) -> Vec<Voice> {
    vosa_separate(score, &VosaConfig::default()).voices
}

/// The voice with the highest F-measure against `truth`; ties go to the
/// lowest index.
pub fn vosa_best_voice(voices: &[Voice], truth: &BTreeSet<NoteId>) -> BTreeSet<NoteId> {
    let mut best: Option<(f64, &Voice)> = None;
    for v in voices {
        let ids: BTreeSet<NoteId> = v.notes.iter().copied().collect();
        let f = Prf::from_sets(&ids, truth).f_measure;
        if best.map_or(true, |(b, _)| f > b) {
            best = Some((f, v));
        }
    }
    best.map(|(_, v)| v.notes.iter().copied().collect()).unwrap_or_default()
}

/// True if no two of `notes` overlap in time.
pub fn is_monophonic<'a>(notes: impl IntoIterator<Item = &'a Note>) -> bool {
    let mut v: Vec<&Note> = notes.into_iter().collect();
    v.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    v.windows(2).all(|w| w[0].end() <= w[1].onset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;

    fn score(notes: &[(u8, f64, f64)]) -> Score {
        Score::new(
            notes
                .iter()
                .enumerate()
                .map(|(i, &(p, o, d))| Note::new(i as u32, p, o, d))
                .collect(),
            480,
        )
        .unwrap()
    }

    fn ids(v: &[u32]) -> BTreeSet<NoteId> {
        v.iter().map(|&i| NoteId(i)).collect()
    }

    #[test]
    fn skyline_examples() {
        assert_eq!(skyline(&score(&[(60, 0.0, 1.0), (72, 0.0, 1.0)])), ids(&[1]));
        assert_eq!(skyline(&score(&[(60, 0.0, 1.0), (62, 1.0, 1.0), (64, 2.0, 1.0)])), ids(&[0, 1, 2]));
        assert_eq!(skyline(&score(&[(80, 0.0, 2.0), (70, 1.0, 1.0)])), ids(&[0]));
        assert_eq!(skyline(&score(&[(70, 0.0, 1.0), (70, 0.0, 2.0)])), ids(&[0]));
        // a note entering as the higher one ends is not shadowed
        assert_eq!(skyline(&score(&[(80, 0.0, 1.0), (70, 1.0, 1.0)])), ids(&[0, 1]));
    }

    #[test]
    fn segments() {
        let s = score(&[(60, 0.0, 1.0)]);
        let seg = segment(&s);
        assert_eq!(seg.len(), 1);
        assert_eq!(voice_count(&seg), 1);

        let s = score(&[(60, 0.0, 2.0), (64, 1.0, 2.0)]);
        let seg = segment(&s);
        let shape: Vec<(f64, f64, usize)> = seg.iter().map(|g| (g.start, g.end, g.sounding.len())).collect();
        assert_eq!(shape, vec![(0.0, 1.0, 1), (1.0, 2.0, 2), (2.0, 3.0, 1)]);
        assert_eq!(voice_count(&seg), 2);

        let s = score(&[(60, 1.0, 1.0), (64, 3.0, 1.0)]);
        let counts: Vec<usize> = segment(&s).iter().map(|g| g.sounding.len()).collect();
        assert_eq!(counts, vec![0, 1, 0, 1]);
    }

    #[test]
    fn parallel_lines_stay_apart() {
        let mut notes = Vec::new();
        for i in 0..8 {
            notes.push((72 + (i % 3) as u8, i as f64, 1.0));
            notes.push((48 + (i % 2) as u8, i as f64, 1.0));
        }
        let s = score(&notes);
        let voices = vosa_voices(&s);
        assert_eq!(voices.len(), 2);
        assert!(voices[0].notes.iter().all(|&id| s.note(id).unwrap().pitch >= 72));
        assert!(voices[1].notes.iter().all(|&id| s.note(id).unwrap().pitch < 72));
        assert_eq!(voices[0].notes.len(), 8);
    }

    #[test]
    fn monophonic_line_is_one_voice() {
        let s = score(&[(60, 0.0, 1.0), (67, 1.0, 1.0), (55, 2.0, 1.0)]);
        let voices = vosa_voices(&s);
        assert_eq!(voices.len(), 1);
        assert_eq!(voices[0].notes, vec![NoteId(0), NoteId(1), NoteId(2)]);
    }

    #[test]
    fn lone_note_follows_nearest_slot() {
        // three voices, then a single note closest to the middle voice
        let s = score(&[(72, 0.0, 1.0), (64, 0.0, 1.0), (50, 0.0, 1.0), (63, 1.0, 1.0), (71, 2.0, 1.0)]);
        let sep = vosa_separate(&s, &VosaConfig::default());
        let pitches = [72u8, 64, 50];
        for step in &sep.steps {
            let entering: Vec<u8> = step.entering.iter().map(|e| e.1).collect();
            let brute = step
                .free
                .iter()
                .copied()
                .permutations(entering.len())
                .map(|slots| assignment_cost(&entering, &slots, &step.last_pitch))
                .min()
                .unwrap();
            assert_eq!(assignment_cost(&entering, &step.chosen, &step.last_pitch), brute);
        }
        let voice_of = |id: u32| sep.voices.iter().position(|v| v.notes.contains(&NoteId(id))).unwrap();
        assert_eq!(pitches.len(), sep.voices.len());
        assert_eq!(voice_of(3), voice_of(1));
        assert_eq!(voice_of(4), voice_of(0));
    }

    #[test]
    fn greedy_above_limit() {
        let last = vec![Some(60), Some(70), None];
        let cfg = VosaConfig { exhaustive_limit: 0 };
        assert_eq!(assign_slots(&[71, 59], &[0, 1, 2], &last, &cfg), vec![1, 0]);
    }

    #[test]
    fn best_voice() {
        let voices = vec![
            Voice {
                index: 0,
                notes: vec![NoteId(0), NoteId(1)],
            },
            Voice {
                index: 1,
                notes: vec![NoteId(2), NoteId(3), NoteId(4)],
            },
        ];
        assert_eq!(vosa_best_voice(&voices, &ids(&[0, 1])), ids(&[0, 1]));
        assert_eq!(vosa_best_voice(&voices, &ids(&[1, 2, 3])), ids(&[2, 3, 4]));
        assert_eq!(vosa_best_voice(&voices, &ids(&[9])), ids(&[0, 1]));
        assert!(vosa_best_voice(&[], &ids(&[1])).is_empty());
    }
}
