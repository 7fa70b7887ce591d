//! Binary piano rolls at 8 pixels per beat, fixed-width windows and
//! window stitching.
//!
//! Rows are MIDI pitches (row `p` is pitch `p`), columns are time steps of
//! one 32nd note.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::score_io::{NoteId, Score};

pub const PITCHES: usize = 128;
pub const PIXELS_PER_BEAT: usize = 8;
pub const WINDOW_WIDTH: usize = 64;
pub const WINDOW_STRIDE: usize = 32;

/// Pixel extent of one note: a single row and a half-open column range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoteSpan {
    pub row: usize,
    pub start_col: usize,
    pub end_col: usize,
}

impl NoteSpan {
    pub fn width(&self) -> usize {
        self.end_col - self.start_col
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.start_col..self.end_col).map(move |c| (self.row, c))
    }
}

#[derive(Debug, Clone)]
pub struct PianoRoll {
    grid: Array2<f64>,
    // flat (row * cols + col) -> ids covering that pixel
    owners: Vec<Vec<NoteId>>,
    spans: BTreeMap<NoteId, NoteSpan>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Column span of a note: `[round(onset * 8), round(end * 8))`, at least one column.
pub fn column_span(onset: f64, end: f64) -> (usize, usize) {
    let ppb = PIXELS_PER_BEAT as f64;
    let start = round_half_up(onset * ppb);
    let stop = round_half_up(end * ppb).max(start + 1);
    (start, stop)
}

/// Rasterize a score. Fails on an empty score.
pub fn quantize(score: &Score) -> Result<PianoRoll> {
    if score.is_empty() {
        return Err(Error::arg("cannot build a piano roll from an empty score"));
    }
    let mut spans = BTreeMap::new();
    let mut cols = (score.end() * PIXELS_PER_BEAT as f64).ceil() as usize;
    for n in score.notes() {
        let (start_col, end_col) = column_span(n.onset, n.end());
        cols = cols.max(end_col);
        spans.insert(
            n.id,
            NoteSpan {
                row: usize::from(n.pitch),
                start_col,
                end_col,
            },
        );
    }
    let cols = cols.max(1);
    let mut grid = Array2::zeros((PITCHES, cols));
    let mut owners = vec![Vec::new(); PITCHES * cols];
    for (id, span) in &spans {
        for (r, c) in span.pixels() {
            grid[[r, c]] = 1.0;
            owners[r * cols + c].push(*id);
        }
    }
    Ok(PianoRoll { grid, owners, spans })
}

impl PianoRoll {
    /// Binary grid, `PITCHES x cols`.
    pub fn grid(&self) -> &Array2<f64> {
        &self.grid
    }

    pub fn cols(&self) -> usize {
        self.grid.ncols()
    }

    pub fn span(&self, id: NoteId) -> Option<&NoteSpan> {
        self.spans.get(&id)
    }

    pub fn spans(&self) -> &BTreeMap<NoteId, NoteSpan> {
        &self.spans
    }

    /// Note ids occupying a pixel.
    pub fn owners(&self, row: usize, col: usize) -> &[NoteId] {
        if row >= PITCHES || col >= self.cols() {
            return &[];
        }
        &self.owners[row * self.cols() + col]
    }

    /// Binary grid restricted to the pixels of the given notes.
    pub fn subset_grid<'a>(&self, ids: impl IntoIterator<Item = &'a NoteId>) -> Array2<f64> {
        let mut g = Array2::zeros(self.grid.raw_dim());
        for id in ids {
            if let Some(span) = self.spans.get(id) {
                for (r, c) in span.pixels() {
                    g[[r, c]] = 1.0;
                }
            }
        }
        g
    }
}

/// A `PITCHES x WINDOW_WIDTH` slice of a roll.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start_col: usize,
    pub data: Array2<f64>,
}

/// Window start columns for a roll of `cols` columns: 0, 32, 64, ... below `cols`.
pub fn window_starts(cols: usize) -> impl Iterator<Item = usize> {
    (0..cols.max(1)).step_by(WINDOW_STRIDE)
}

/// Cut a `PITCHES x cols` grid into zero-padded overlapping windows.
pub fn cut_grid(grid: ArrayView2<'_, f64>) -> Vec<Window> {
    let cols = grid.ncols();
    window_starts(cols)
        .map(|start| {
            let stop = (start + WINDOW_WIDTH).min(cols);
            let mut data = Array2::zeros((grid.nrows(), WINDOW_WIDTH));
            data.slice_mut(s![.., ..stop - start])
                .assign(&grid.slice(s![.., start..stop]));
            Window { start_col: start, data }
        })
        .collect()
}

pub fn cut_windows(roll: &PianoRoll) -> Vec<Window> {
    cut_grid(roll.grid.view())
}

/// Per-pixel melody probabilities for a whole piece.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityRoll {
    pub grid: Array2<f64>,
}

impl ProbabilityRoll {
    /// Elementwise product with the binary input roll.
    pub fn masked(&self, roll: &PianoRoll) -> Result<ProbabilityRoll> {
        if self.grid.dim() != roll.grid.dim() {
            return Err(Error::arg(format!(
                "probability roll {:?} does not match piano roll {:?}",
                self.grid.dim(),
                roll.grid.dim()
            )));
        }
        Ok(ProbabilityRoll {
            grid: &self.grid * &roll.grid,
        })
    }

    /// Binary PGM (P5), one byte per pixel, highest pitch on top.
    pub fn write_pgm<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_pgm(self.grid.view(), out)
    }
}

/// Write values in [0, 1] as an 8-bit PGM with pitch 127 in the first row.
pub fn write_pgm<W: Write>(grid: ArrayView2<'_, f64>, mut out: W) -> std::io::Result<()> {
    let (rows, cols) = grid.dim();
    write!(out, "P5\n{cols} {rows}\n255\n")?;
    let mut line = Vec::with_capacity(cols);
    for r in (0..rows).rev() {
        line.clear();
        line.extend(
            grid.row(r)
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out.write_all(&line)?;
    }
    Ok(())
}

/// Average overlapping window predictions into a `PITCHES x cols` roll.
pub fn stitch(windows: &[(usize, Array2<f64>)], cols: usize) -> Result<ProbabilityRoll> {
    let mut sum = Array2::<f64>::zeros((PITCHES, cols));
    let mut count = vec![0u32; cols];
    for (start, pred) in windows {
        if pred.dim() != (PITCHES, WINDOW_WIDTH) {
            return Err(Error::arg(format!(
                "window prediction at column {start} has shape {:?}, expected ({PITCHES}, {WINDOW_WIDTH})",
                pred.dim()
            )));
        }
        if *start >= cols {
            continue;
        }
        let stop = (start + WINDOW_WIDTH).min(cols);
        let mut dst = sum.slice_mut(s![.., *start..stop]);
        dst += &pred.slice(s![.., ..stop - start]);
        for c in &mut count[*start..stop] {
            *c += 1;
        }
    }
    for (c, n) in count.iter().enumerate() {
        if *n > 1 {
            sum.column_mut(c).mapv_inplace(|v| v / f64::from(*n));
        }
    }
    Ok(ProbabilityRoll { grid: sum })
}

/// Lower median of a non-empty slice.
pub(crate) fn lower_median(values: &mut [f64]) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Median masked probability over each note's pixels.
pub fn note_probabilities(prob: &ProbabilityRoll, roll: &PianoRoll) -> Result<BTreeMap<NoteId, f64>> {
    let masked = prob.masked(roll)?;
    let mut out = BTreeMap::new();
    let mut buf = Vec::new();
    for (id, span) in &roll.spans {
        buf.clear();
        buf.extend(span.pixels().map(|(r, c)| masked.grid[[r, c]]));
        if buf.is_empty() {
            return Err(Error::Internal(format!("note {id} owns no pixels")));
        }
        out.insert(*id, lower_median(&mut buf));
    }
    Ok(out)
}
