//! Occlusion saliency.
//!
//! Each iteration zeroes a few random rectangles of the input roll and
//! measures how much the predicted probability of a target note drops
//! (mean over its pixels). The drop is credited to every note touched by the
//! rectangles; pixels are finally normalized by how often they were zeroed.
//! Iterations that touch the target itself are skipped.

use std::collections::BTreeSet;
use std::io::Write;
use std::ops::RangeInclusive;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pianoroll::{cut_grid, PianoRoll, WINDOW_WIDTH};
use crate::pipeline::WindowModel;
use crate::score_io::NoteId;

/// Half-open pixel rectangle: rows `row..row + height`, columns `col..col + width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.height).contains(&r) && (self.col..self.col + self.width).contains(&c)
    }

    fn cols(&self) -> std::ops::Range<usize> {
        self.col..self.col + self.width
    }
}

/// Copy of `grid` with every pixel inside `rects` set to 0.
pub fn occlude(grid: ArrayView2<'_, f64>, rects: &[Rect]) -> Result<Array2<f64>> {
    let (rows, cols) = grid.dim();
    let mut out = grid.to_owned();
    for r in rects {
        if r.row + r.height > rows || r.col + r.width > cols {
            return Err(Error::arg(format!("rectangle {r:?} exceeds the {rows}x{cols} roll")));
        }
        out.slice_mut(s![r.row..r.row + r.height, r.col..r.col + r.width]).fill(0.0);
    }
    Ok(out)
}

/// Mean of `p - p_occluded` over `pixels`.
pub fn note_difference(p: ArrayView2<'_, f64>, p_occluded: ArrayView2<'_, f64>, pixels: &[(usize, usize)]) -> Result<f64> {
    if p.dim() != p_occluded.dim() {
        return Err(Error::arg(format!("shape {:?} differs from {:?}", p.dim(), p_occluded.dim())));
    }
    if pixels.is_empty() {
        return Err(Error::arg("note region is empty"));
    }
    let sum: f64 = pixels.iter().map(|&(r, c)| p[[r, c]] - p_occluded[[r, c]]).sum();
    Ok(sum / pixels.len() as f64)
}

/// Draws the rectangles of one iteration from its own random stream, so
/// iterations are reproducible independently of each other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RectSampler {
    pub seed: u64,
    pub width: RangeInclusive<usize>,
    pub height: RangeInclusive<usize>,
    pub per_iteration: usize,
}

impl RectSampler {
    pub fn new(seed: u64) -> Self {
        RectSampler {
            seed,
            width: 4..=32,
            height: 4..=32,
            per_iteration: 5,
        }
    }

    /// Sides larger than the roll are clipped to it.
    pub fn sample(&self, iteration: u64, rows: usize, cols: usize) -> Vec<Rect> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(iteration);
        (0..self.per_iteration)
            .map(|_| {
                let height = rng.gen_range(self.height.clone()).clamp(1, rows);
                let width = rng.gen_range(self.width.clone()).clamp(1, cols);
                Rect {
                    row: rng.gen_range(0..=rows - height),
                    col: rng.gen_range(0..=cols - width),
                    height,
                    width,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub target: NoteId,
    pub accum: Array2<f64>,
    pub zero_count: Array2<u32>,
    pub map: Array2<f64>,
    pub iterations: usize,
    pub skipped: usize,
}

/// Sparse JSON form: only pixels with a non-zero value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyJson {
    pub target: NoteId,
    pub rows: usize,
    pub cols: usize,
    pub iterations: usize,
    pub skipped: usize,
    /// `[row, col, value]` triples, row = MIDI pitch.
    pub pixels: Vec<(usize, usize, f64)>,
}

impl SaliencyMap {
    pub fn to_json(&self) -> SaliencyJson {
        let (rows, cols) = self.map.dim();
        SaliencyJson {
            target: self.target,
            rows,
            cols,
            iterations: self.iterations,
            skipped: self.skipped,
            pixels: self
                .map
                .indexed_iter()
                .filter(|(_, &v)| v != 0.0)
                .map(|((r, c), &v)| (r, c, v))
                .collect(),
        }
    }

    /// Signed map as an 8-bit PGM, 128 = zero, scaled by the largest magnitude.
    pub fn write_pgm<W: Write>(&self, out: W) -> std::io::Result<()> {
        let peak = self.map.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scaled = if peak > 0.0 {
            self.map.mapv(|v| 0.5 + 0.5 * v / peak)
        } else {
            Array2::from_elem(self.map.dim(), 0.5)
        };
        crate::pianoroll::write_pgm(scaled.view(), out)
    }
}

/// Target pixel values of the stitched prediction, reproducing
/// [`crate::pianoroll::stitch`] summation order exactly.
fn stitched_at(starts: &[usize], preds: &[&Array2<f64>], pixels: &[(usize, usize)]) -> Vec<f64> {
    pixels
        .iter()
        .map(|&(r, c)| {
            let mut sum = 0.0;
            let mut n = 0u32;
            for (&s, p) in starts.iter().zip(preds) {
                if (s..s + WINDOW_WIDTH).contains(&c) {
                    sum += p[[r, c - s]];
                    n += 1;
                }
            }
            if n > 1 {
                sum / f64::from(n)
            } else {
                sum
            }
        })
        .collect()
}

/// Precomputed clean predictions around the target.
struct Probe<'a, M> {
    model: &'a M,
    roll: &'a PianoRoll,
    pixels: Vec<(usize, usize)>,
    starts: Vec<usize>,
    clean: Vec<Array2<f64>>,
    base: Vec<f64>,
    sampler: &'a RectSampler,
}

impl<'a, M: WindowModel> Probe<'a, M> {
    fn new(model: &'a M, roll: &'a PianoRoll, target: NoteId, sampler: &'a RectSampler) -> Result<Self> {
        let span = *roll
            .span(target)
            .ok_or_else(|| Error::arg(format!("note {target} is not part of the roll")))?;
        let windows: Vec<_> = cut_grid(roll.grid().view())
            .into_iter()
            .filter(|w| w.start_col < span.end_col && span.start_col < w.start_col + WINDOW_WIDTH)
            .collect();
        let views: Vec<_> = windows.iter().map(|w| w.data.view()).collect();
        let clean = model.predict_windows(&views)?;
        let starts: Vec<usize> = windows.iter().map(|w| w.start_col).collect();
        let pixels: Vec<(usize, usize)> = span.pixels().collect();
        let base = stitched_at(&starts, &clean.iter().collect::<Vec<_>>(), &pixels);
        Ok(Probe {
            model,
            roll,
            pixels,
            starts,
            clean,
            base,
            sampler,
        })
    }

    /// Rectangles and target difference of one iteration; `None` if skipped.
    fn iteration(&self, it: usize) -> Result<Option<(Vec<Rect>, f64)>> {
        let grid = self.roll.grid();
        let (rows, cols) = grid.dim();
        let rects = self.sampler.sample(it as u64, rows, cols);
        if self.pixels.iter().any(|&(r, c)| rects.iter().any(|q| q.contains(r, c))) {
            return Ok(None);
        }
        let occluded = occlude(grid.view(), &rects)?;
        let touched: Vec<usize> = (0..self.starts.len())
            .filter(|&k| {
                let w = self.starts[k]..self.starts[k] + WINDOW_WIDTH;
                rects.iter().any(|q| q.cols().any(|c| w.contains(&c)))
            })
            .collect();
        let mut fresh: Vec<Option<Array2<f64>>> = vec![None; self.starts.len()];
        if !touched.is_empty() {
            let cut: Vec<Array2<f64>> = touched
                .iter()
                .map(|&k| {
                    let start = self.starts[k];
                    let stop = (start + WINDOW_WIDTH).min(cols);
                    let mut data = Array2::zeros((rows, WINDOW_WIDTH));
                    data.slice_mut(s![.., ..stop - start])
                        .assign(&occluded.slice(s![.., start..stop]));
                    data
                })
                .collect();
            let views: Vec<_> = cut.iter().map(|a| a.view()).collect();
            for (k, p) in touched.iter().zip(self.model.predict_windows(&views)?) {
                fresh[*k] = Some(p);
            }
        }
        let preds: Vec<&Array2<f64>> = fresh
            .iter()
            .zip(&self.clean)
            .map(|(f, c)| f.as_ref().unwrap_or(c))
            .collect();
        let after = stitched_at(&self.starts, &preds, &self.pixels);
        // target pixels are never occluded, so the input mask is 1 there
        let d = self.base.iter().zip(&after).map(|(p, q)| p - q).sum::<f64>() / self.pixels.len() as f64;
        if !d.is_finite() {
            return Err(Error::Numeric(format!("saliency difference {d} at iteration {it}")));
        }
        Ok(Some((rects, d)))
    }
}

/// Occlusion saliency of note `target` over `iterations` sampled iterations.
///
/// Only the windows overlapping the target are re-evaluated, which is exact
/// because an eval-mode window prediction depends on that window alone.
pub fn saliency_map(
    model: &impl WindowModel,
    roll: &PianoRoll,
    target: NoteId,
    iterations: usize,
    sampler: &RectSampler,
) -> Result<SaliencyMap> {
    if iterations == 0 {
        return Err(Error::arg("saliency needs at least one iteration"));
    }
    let probe = Probe::new(model, roll, target, sampler)?;
    let outcomes = (0..iterations).map(|it| probe.iteration(it)).collect::<Result<Vec<_>>>()?;
    Ok(accumulate(roll, target, outcomes))
}

/// [`saliency_map`] with iterations spread over `jobs` threads. The result is
/// identical to the sequential one.
pub fn saliency_map_parallel<M: WindowModel + Sync>(
    model: &M,
    roll: &PianoRoll,
    target: NoteId,
    iterations: usize,
    sampler: &RectSampler,
    jobs: usize,
) -> Result<SaliencyMap> {
    if iterations == 0 {
        return Err(Error::arg("saliency needs at least one iteration"));
    }
    let probe = Probe::new(model, roll, target, sampler)?;
    let jobs = jobs.clamp(1, iterations);
    let chunk = iterations.div_ceil(jobs);
    let parts: Vec<Result<Vec<_>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let probe = &probe;
                scope.spawn(move || {
                    (j * chunk..((j + 1) * chunk).min(iterations))
                        .map(|it| probe.iteration(it))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Internal("saliency worker panicked".into()))))
            .collect()
    });
    let mut outcomes = Vec::with_capacity(iterations);
    for p in parts {
        outcomes.extend(p?);
    }
    Ok(accumulate(roll, target, outcomes))
}

fn accumulate(roll: &PianoRoll, target: NoteId, outcomes: Vec<Option<(Vec<Rect>, f64)>>) -> SaliencyMap {
    let (rows, cols) = roll.grid().dim();
    let mut accum = Array2::<f64>::zeros((rows, cols));
    let mut zero_count = Array2::<u32>::zeros((rows, cols));
    let iterations = outcomes.len();
    let mut skipped = 0;
    for outcome in outcomes {
        let Some((rects, d)) = outcome else {
            skipped += 1;
            continue;
        };
        let mut hit: BTreeSet<NoteId> = BTreeSet::new();
        let mut zeroed = Array2::<bool>::from_elem((rows, cols), false);
        for q in &rects {
            for r in q.row..q.row + q.height {
                for c in q.cols() {
                    zeroed[[r, c]] = true;
                    hit.extend(roll.owners(r, c));
                }
            }
        }
        for (z, n) in zeroed.iter().zip(zero_count.iter_mut()) {
            *n += u32::from(*z);
        }
        for id in &hit {
            let sp = roll.span(*id).expect("owners come from the roll");
            for (r, c) in sp.pixels() {
                accum[[r, c]] += d;
            }
        }
    }
    let mut map = Array2::<f64>::zeros((rows, cols));
    for ((m, a), n) in map.iter_mut().zip(&accum).zip(&zero_count) {
        if *n > 0 {
            *m = a / f64::from(*n);
        }
    }
    SaliencyMap {
        target,
        accum,
        zero_count,
        map,
        iterations,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pianoroll::quantize;
    use crate::pipeline::{predict_grid, FnModel};
    use crate::score_io::{Note, Score};

    fn roll() -> PianoRoll {
        let s = Score::new(
            vec![
                Note::new(0, 76, 0.0, 1.0),
                Note::new(1, 48, 0.0, 2.0),
                Note::new(2, 52, 1.0, 1.0),
                Note::new(3, 79, 6.0, 1.0),
            ],
            480,
        )
        .unwrap();
        quantize(&s).unwrap()
    }

    /// Output everywhere = fraction of set pixels in the window.
    fn mass() -> FnModel<impl Fn(ArrayView2<'_, f64>) -> Array2<f64>> {
        FnModel(|w: ArrayView2<'_, f64>| Array2::from_elem(w.dim(), w.sum() / 64.0))
    }

    #[test]
    fn occlusion() {
        let g = Array2::from_elem((4, 4), 1.0);
        let r = Rect {
            row: 1,
            col: 1,
            height: 2,
            width: 2,
        };
        let o = occlude(g.view(), &[r, r]).unwrap();
        assert_eq!(o.sum(), 12.0);
        assert_eq!(g.sum(), 16.0);
        assert!(occlude(g.view(), &[Rect { row: 3, ..r }]).is_err());
    }

    #[test]
    fn eq1_arithmetic() {
        let p = Array2::from_shape_vec((1, 2), vec![0.8, 0.6]).unwrap();
        let q = Array2::from_shape_vec((1, 2), vec![0.4, 0.6]).unwrap();
        let d = note_difference(p.view(), q.view(), &[(0, 0), (0, 1)]).unwrap();
        assert!((d - 0.2).abs() < 1e-15);
        assert_eq!(note_difference(p.view(), p.view(), &[(0, 0)]).unwrap(), 0.0);
        assert!(note_difference(p.view(), q.view(), &[]).is_err());
    }

    #[test]
    fn sampler_is_in_bounds_and_reproducible() {
        let s = RectSampler::new(4);
        for it in 0..50 {
            let a = s.sample(it, 128, 20);
            assert_eq!(a, s.sample(it, 128, 20));
            assert_eq!(a.len(), 5);
            for r in a {
                assert!(r.row + r.height <= 128 && r.col + r.width <= 20);
                assert!((4..=32).contains(&r.height) && (4..=20).contains(&r.width));
            }
        }
        assert_ne!(s.sample(0, 128, 64), s.sample(1, 128, 64));
    }

    #[test]
    fn single_iteration_trace() {
        let roll = roll();
        let model = mass();
        // find a seed whose first iteration hits note 1 but not the target (note 0)
        let target = NoteId(0);
        let sampler = (0..500)
            .map(RectSampler::new)
            .find(|s| {
                let rects = s.sample(0, 128, roll.cols());
                let t = roll.span(target).unwrap();
                !t.pixels().any(|(r, c)| rects.iter().any(|q| q.contains(r, c)))
                    && roll.span(NoteId(1)).unwrap().pixels().any(|(r, c)| rects.iter().any(|q| q.contains(r, c)))
            })
            .unwrap();
        let map = saliency_map(&model, &roll, target, 1, &sampler).unwrap();
        assert_eq!(map.skipped, 0);

        // hand trace through the full pipeline
        let rects = sampler.sample(0, 128, roll.cols());
        let occluded = occlude(roll.grid().view(), &rects).unwrap();
        let p = predict_grid(&model, roll.grid().view()).unwrap();
        let q = predict_grid(&model, occluded.view()).unwrap();
        let t: Vec<_> = roll.span(target).unwrap().pixels().collect();
        let d = note_difference(p.grid.view(), q.grid.view(), &t).unwrap();
        assert!(d > 0.0);
        for (r, c) in roll.span(NoteId(1)).unwrap().pixels() {
            assert_eq!(map.accum[[r, c]], d);
            if rects.iter().any(|q| q.contains(r, c)) {
                assert_eq!(map.map[[r, c]], d);
            }
        }
        for (r, c) in t {
            assert_eq!(map.map[[r, c]], 0.0);
        }
    }

    #[test]
    fn identity_model_gives_zero() {
        let roll = roll();
        let model = FnModel(|w: ArrayView2<'_, f64>| w.to_owned());
        let map = saliency_map(&model, &roll, NoteId(3), 40, &RectSampler::new(1)).unwrap();
        assert!(map.map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forced_onto_target_skips_everything() {
        let roll = roll();
        let sampler = RectSampler {
            width: 200..=200,
            height: 200..=200,
            ..RectSampler::new(0)
        };
        let map = saliency_map(&mass(), &roll, NoteId(0), 10, &sampler).unwrap();
        assert_eq!(map.skipped, 10);
        assert!(map.map.iter().all(|&v| v == 0.0));
        assert!(map.zero_count.iter().all(|&v| v == 0));
        assert!(saliency_map(&mass(), &roll, NoteId(0), 0, &sampler).is_err());
        assert!(saliency_map(&mass(), &roll, NoteId(9), 1, &sampler).is_err());
    }

    #[test]
    fn deterministic_and_json() {
        let roll = roll();
        let a = saliency_map(&mass(), &roll, NoteId(0), 60, &RectSampler::new(7)).unwrap();
        let b = saliency_map(&mass(), &roll, NoteId(0), 60, &RectSampler::new(7)).unwrap();
        assert_eq!(a, b);
        let c = saliency_map_parallel(&mass(), &roll, NoteId(0), 60, &RectSampler::new(7), 3).unwrap();
        assert_eq!(a, c);
        let j = a.to_json();
        assert_eq!(j.pixels.len(), a.map.iter().filter(|&&v| v != 0.0).count());
        let mut pgm = Vec::new();
        a.write_pgm(&mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n"));
    }
}
