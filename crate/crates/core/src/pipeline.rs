//! Score in, melody out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::baselines::{skyline, vosa_best_voice, vosa_voices};
use crate::convnet::{forward_eval, ModelParams};
use crate::error::{Error, Result};
use crate::melody_select::{extract_melody, SelectMode};
use crate::pianoroll::{cut_grid, note_probabilities, quantize, stitch, PianoRoll, ProbabilityRoll};
use crate::score_io::{NoteId, Score};

/// Anything mapping `128 x 64` windows to same-shape probability maps.
pub trait WindowModel {
    fn predict_windows(&self, windows: &[ArrayView2<'_, f64>]) -> Result<Vec<Array2<f64>>>;
}

impl WindowModel for ModelParams {
    fn predict_windows(&self, windows: &[ArrayView2<'_, f64>]) -> Result<Vec<Array2<f64>>> {
        forward_eval(self, windows)
    }
}

/// Adapts a per-window closure, mostly for tests and stubs.
pub struct FnModel<F>(pub F);

impl<F: Fn(ArrayView2<'_, f64>) -> Array2<f64>> WindowModel for FnModel<F> {
    fn predict_windows(&self, windows: &[ArrayView2<'_, f64>]) -> Result<Vec<Array2<f64>>> {
        Ok(windows.iter().map(|w| (self.0)(*w)).collect())
    }
}

/// Windows, forward pass and stitching over a whole grid, unmasked.
pub fn predict_grid(model: &impl WindowModel, grid: ArrayView2<'_, f64>) -> Result<ProbabilityRoll> {
    let windows = cut_grid(grid);
    let views: Vec<_> = windows.iter().map(|w| w.data.view()).collect();
    let preds = model.predict_windows(&views)?;
    let pairs: Vec<(usize, Array2<f64>)> = windows.iter().map(|w| w.start_col).zip(preds).collect();
    stitch(&pairs, grid.ncols())
}

/// Masked probability roll and per-note probabilities.
pub fn predict_probabilities(
    model: &impl WindowModel,
    roll: &PianoRoll,
) -> Result<(ProbabilityRoll, BTreeMap<NoteId, f64>)> {
    let prob = predict_grid(model, roll.grid().view())?.masked(roll)?;
    if let Some(bad) = prob.grid.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("network produced {bad}")));
    }
    let notes = note_probabilities(&prob, roll)?;
    Ok((prob, notes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cnn,
    CnnMono,
    Skyline,
    Vosa,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cnn, Method::CnnMono, Method::Skyline, Method::Vosa];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cnn => "cnn",
            Method::CnnMono => "cnn_mono",
            Method::Skyline => "skyline",
            Method::Vosa => "vosa",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::Cnn | Method::CnnMono)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown method {s:?}; expected cnn, cnn_mono, skyline or vosa")))
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub melody: BTreeSet<NoteId>,
    /// Present for the network methods.
    pub probabilities: Option<BTreeMap<NoteId, f64>>,
    pub probability_roll: Option<ProbabilityRoll>,
}

/// Runs `method` on `score`. The network methods need `model`; `vosa` picks
/// its voice against the score's own melody annotation.
pub fn predict<M: WindowModel>(score: &Score, method: Method, model: Option<&M>) -> Result<Prediction> {
    match method {
        Method::Cnn | Method::CnnMono => {
            let model = model.ok_or_else(|| Error::arg(format!("method {method} needs a checkpoint")))?;
            let roll = quantize(score)?;
            let (prob, notes) = predict_probabilities(model, &roll)?;
            let mode = if method == Method::Cnn {
                SelectMode::Cnn
            } else {
                SelectMode::CnnMono
            };
            Ok(Prediction {
                melody: extract_melody(score, &notes, mode)?.into_iter().collect(),
                probabilities: Some(notes),
                probability_roll: Some(prob),
            })
        }
        Method::Skyline => Ok(Prediction {
            melody: skyline(score),
            probabilities: None,
            probability_roll: None,
        }),
        Method::Vosa => {
            let truth = score
                .melody_ids()
                .ok_or_else(|| Error::arg("vosa selects its voice against a melody annotation, which is missing"))?;
            Ok(Prediction {
                melody: vosa_best_voice(&vosa_voices(score), truth),
                probabilities: None,
                probability_roll: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pianoroll::{PITCHES, WINDOW_WIDTH};
    use crate::score_io::Note;

    /// Probability rising with pitch: upper notes win.
    fn by_pitch() -> FnModel<impl Fn(ArrayView2<'_, f64>) -> Array2<f64>> {
        FnModel(|w: ArrayView2<'_, f64>| Array2::from_shape_fn(w.dim(), |(r, _)| r as f64 / 127.0))
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("mono".parse::<Method>().is_err());
    }

    #[test]
    fn probabilities_are_masked() {
        let s = Score::new(vec![Note::new(0, 60, 0.0, 1.0), Note::new(1, 80, 9.0, 1.0)], 480).unwrap();
        let roll = quantize(&s).unwrap();
        let (prob, notes) = predict_probabilities(&by_pitch(), &roll).unwrap();
        assert_eq!(prob.grid.dim(), (PITCHES, roll.cols()));
        assert!(roll.cols() > WINDOW_WIDTH);
        let set = prob.grid.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(set, 16);
        assert_eq!(notes[&NoteId(1)], 80.0 / 127.0);
    }

    #[test]
    fn methods() {
        let s = Score::new(
            vec![Note::new(0, 60, 0.0, 2.0), Note::new(1, 76, 0.0, 1.0), Note::new(2, 79, 1.0, 1.0)],
            480,
        )
        .unwrap()
        .with_melody_ids([NoteId(1), NoteId(2)].into())
        .unwrap();
        let expected: BTreeSet<NoteId> = [NoteId(1), NoteId(2)].into();
        let model = by_pitch();
        for m in Method::ALL {
            let p = predict(&s, m, Some(&model)).unwrap();
            assert_eq!(p.melody, expected, "{m}");
            assert_eq!(p.probabilities.is_some(), m.needs_model());
        }
        assert!(predict::<ModelParams>(&s, Method::Cnn, None).is_err());
    }
}
