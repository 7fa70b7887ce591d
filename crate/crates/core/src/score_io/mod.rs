//! Scores, their MIDI ingestion and the MIDI/JSON prediction outputs.
//!
//! Score time is measured in beats (quarter notes): a tick offset `t` in a
//! file with `ticks_per_beat = q` becomes `t / q` beats. Tempo is ignored.

mod smf;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use smf::{parse_midi, parse_midi_with, write_midi, ParseOptions};

/// Identity of a note within one [`Score`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NoteId(pub u32);

impl fmt::Display for NoteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A pitched event in beat time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub id: NoteId,
    /// MIDI pitch number, 0..=127.
    pub pitch: u8,
    /// Onset in beats.
    pub onset: f64,
    /// Duration in beats, strictly positive.
    pub duration: f64,
}

impl Note {
    pub fn new(id: u32, pitch: u8, onset: f64, duration: f64) -> Self {
        Note {
            id: NoteId(id),
            pitch,
            onset,
            duration,
        }
    }

    #[inline]
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }

    /// Half-open interval overlap in beat time.
    pub fn overlaps(&self, other: &Note) -> bool {
        self.onset < other.end() && other.onset < self.end()
    }
}

/// A set of notes plus optional ground-truth melody annotation.
///
/// Notes are kept sorted by `(onset, pitch, id)`.
#[derive(Debug, Clone)]
pub struct Score {
    notes: Vec<Note>,
    ticks_per_beat: u16,
    melody_ids: Option<BTreeSet<NoteId>>,
    by_id: HashMap<NoteId, usize>,
}

impl Score {
    pub fn new(mut notes: Vec<Note>, ticks_per_beat: u16) -> Result<Self> {
        if ticks_per_beat == 0 {
            return Err(Error::arg("ticks_per_beat must be positive"));
        }
        for n in &notes {
            if n.pitch > 127 {
                return Err(Error::arg(format!("note {} has pitch {} > 127", n.id, n.pitch)));
            }
            if !(n.duration > 0.0) || !n.duration.is_finite() {
                return Err(Error::arg(format!(
                    "note {} has non-positive duration {}",
                    n.id, n.duration
                )));
            }
            if !(n.onset >= 0.0) || !n.onset.is_finite() {
                return Err(Error::arg(format!("note {} has invalid onset {}", n.id, n.onset)));
            }
        }
        notes.sort_by(|a, b| {
            a.onset
                .total_cmp(&b.onset)
                .then(a.pitch.cmp(&b.pitch))
                .then(a.id.cmp(&b.id))
        });
        let mut by_id = HashMap::with_capacity(notes.len());
        for (i, n) in notes.iter().enumerate() {
            if by_id.insert(n.id, i).is_some() {
                return Err(Error::arg(format!("duplicate note id {}", n.id)));
            }
        }
        Ok(Score {
            notes,
            ticks_per_beat,
            melody_ids: None,
            by_id,
        })
    }

    /// Attach a ground-truth melody; every id must belong to the score.
    pub fn with_melody_ids(mut self, ids: BTreeSet<NoteId>) -> Result<Self> {
        self.check_ids(&ids)?;
        self.melody_ids = Some(ids);
        Ok(self)
    }

    pub fn notes(&self) -> &[Note] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn ticks_per_beat(&self) -> u16 {
        self.ticks_per_beat
    }

    pub fn melody_ids(&self) -> Option<&BTreeSet<NoteId>> {
        self.melody_ids.as_ref()
    }

    pub fn note(&self, id: NoteId) -> Option<&Note> {
        self.by_id.get(&id).map(|&i| &self.notes[i])
    }

    pub fn contains(&self, id: NoteId) -> bool {
        self.by_id.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = NoteId> + '_ {
        self.notes.iter().map(|n| n.id)
    }

    /// Latest note end time in beats (0 for an empty score).
    pub fn end(&self) -> f64 {
        self.notes.iter().map(Note::end).fold(0.0, f64::max)
    }

    /// Fails with an argument error naming the first id not in the score.
    pub fn check_ids<'a>(&self, ids: impl IntoIterator<Item = &'a NoteId>) -> Result<()> {
        for id in ids {
            if !self.contains(*id) {
                return Err(Error::arg(format!("note id {id} is not part of the score")));
            }
        }
        Ok(())
    }
}

/// Serialization target of [`write_outputs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Midi,
    Json,
}

/// One element of the JSON prediction output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub id: NoteId,
    pub pitch: u8,
    pub onset_beats: f64,
    pub duration_beats: f64,
    pub is_melody: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

/// Serialize a prediction: a two-track MIDI file (melody first) or JSON note records.
pub fn write_outputs(score: &Score, predicted: &BTreeSet<NoteId>, format: OutputFormat) -> Result<Vec<u8>> {
    match format {
        OutputFormat::Midi => write_midi(score, predicted),
        OutputFormat::Json => write_json(score, predicted, None),
    }
}

/// JSON note records, optionally carrying per-note melody probabilities.
pub fn write_json(
    score: &Score,
    predicted: &BTreeSet<NoteId>,
    probabilities: Option<&BTreeMap<NoteId, f64>>,
) -> Result<Vec<u8>> {
    score.check_ids(predicted)?;
    let records = note_records(score, predicted, probabilities);
    Ok(serde_json::to_vec_pretty(&records)?)
}

pub fn note_records(
    score: &Score,
    predicted: &BTreeSet<NoteId>,
    probabilities: Option<&BTreeMap<NoteId, f64>>,
) -> Vec<NoteRecord> {
    score
        .notes()
        .iter()
        .map(|n| NoteRecord {
            id: n.id,
            pitch: n.pitch,
            onset_beats: n.onset,
            duration_beats: n.duration,
            is_melody: predicted.contains(&n.id),
            probability: probabilities.and_then(|p| p.get(&n.id).copied()),
        })
        .collect()
}

/// Parse an external ground-truth annotation: a JSON array of note ids.
pub fn parse_melody_ids(bytes: &[u8]) -> Result<BTreeSet<NoteId>> {
    let ids: Vec<NoteId> = serde_json::from_slice(bytes)?;
    Ok(ids.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_sorts_by_onset_then_pitch() {
        let s = Score::new(
            vec![Note::new(0, 72, 1.0, 1.0), Note::new(1, 60, 0.0, 1.0), Note::new(2, 48, 1.0, 0.5)],
            480,
        )
        .unwrap();
        let ids: Vec<u32> = s.ids().map(|i| i.0).collect();
        assert_eq!(ids, vec![1, 2, 0]);
    }

    #[test]
    fn score_rejects_invalid_notes() {
        assert!(Score::new(vec![Note::new(0, 60, 0.0, 0.0)], 480).is_err());
        assert!(Score::new(vec![Note::new(0, 128, 0.0, 1.0)], 480).is_err());
        assert!(Score::new(vec![Note::new(0, 60, 0.0, 1.0), Note::new(0, 61, 0.0, 1.0)], 480).is_err());
        assert!(Score::new(vec![], 0).is_err());
    }

    #[test]
    fn melody_ids_must_be_subset() {
        let s = Score::new(vec![Note::new(0, 60, 0.0, 1.0)], 480).unwrap();
        assert!(s.clone().with_melody_ids([NoteId(3)].into()).is_err());
        assert!(s.with_melody_ids([NoteId(0)].into()).is_ok());
    }

    #[test]
    fn json_of_single_predicted_note() {
        let s = Score::new(vec![Note::new(0, 60, 0.0, 1.0)], 480).unwrap();
        let bytes = write_outputs(&s, &[NoteId(0)].into(), OutputFormat::Json).unwrap();
        let recs: Vec<NoteRecord> = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].is_melody);
        assert_eq!(recs[0].probability, None);
    }

    #[test]
    fn unknown_predicted_id_is_rejected() {
        let s = Score::new(vec![Note::new(0, 60, 0.0, 1.0)], 480).unwrap();
        for f in [OutputFormat::Json, OutputFormat::Midi] {
            assert!(matches!(
                write_outputs(&s, &[NoteId(9)].into(), f),
                Err(Error::Argument(_))
            ));
        }
    }

    #[test]
    fn external_ids_parse() {
        let ids = parse_melody_ids(b"[3, 1, 2]").unwrap();
        assert_eq!(ids, [NoteId(1), NoteId(2), NoteId(3)].into());
    }
}
