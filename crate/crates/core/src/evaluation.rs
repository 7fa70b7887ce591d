//! Note-level precision, recall and F-measure, per piece and per corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pianoroll::column_span;
use crate::score_io::{NoteId, Score};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    /// Counts over id sets. An empty prediction has precision 0, an empty
    /// truth recall 0.
    pub fn from_sets(predicted: &BTreeSet<NoteId>, truth: &BTreeSet<NoteId>) -> Prf {
        let tp = predicted.intersection(truth).count();
        Prf::from_counts(tp, predicted.len() - tp, truth.len() - tp)
    }

    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f_measure = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f_measure,
            tp,
            fp,
            fn_,
        }
    }
}

/// F-measure of `predicted` against `truth`; both must reference notes of `score`.
pub fn f_measure(score: &Score, predicted: &BTreeSet<NoteId>, truth: &BTreeSet<NoteId>) -> Result<Prf> {
    score.check_ids(predicted)?;
    score.check_ids(truth)?;
    Ok(Prf::from_sets(predicted, truth))
}

/// Maps the notes of a separately produced melody onto `score` by exact
/// pitch and quantized onset column. Each score note is matched at most
/// once, lowest id first; unmatched external notes are dropped.
pub fn match_external(score: &Score, external: &Score) -> BTreeSet<NoteId> {
    let key = |pitch: u8, onset: f64| (pitch, column_span(onset, onset).0);
    let mut pool: BTreeMap<(u8, usize), Vec<NoteId>> = BTreeMap::new();
    for n in score.notes() {
        pool.entry(key(n.pitch, n.onset)).or_default().push(n.id);
    }
    for ids in pool.values_mut() {
        ids.sort_unstable_by(|a, b| b.cmp(a));
    }
    external
        .notes()
        .iter()
        .filter_map(|n| pool.get_mut(&key(n.pitch, n.onset)).and_then(Vec::pop))
        .collect()
}

/// One scored prediction, the unit of [`evaluate_corpus`].
#[derive(Debug, Clone)]
pub struct PieceInput<'a> {
    pub piece: String,
    pub method: String,
    pub score: &'a Score,
    pub predicted: BTreeSet<NoteId>,
    pub truth: BTreeSet<NoteId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceEval {
    pub piece: String,
    pub method: String,
    #[serde(flatten)]
    pub metrics: Prf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub pieces: usize,
    pub mean: Summary,
    pub median: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sorted by method, then piece name.
    pub pieces: Vec<PieceEval>,
    pub corpus: Vec<MethodSummary>,
    /// Pieces left out, typically for lacking an annotation.
    #[serde(default)]
    pub skipped: Vec<String>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

impl EvalReport {
    /// Builds the corpus summaries from per-piece rows.
    pub fn from_pieces(mut pieces: Vec<PieceEval>, skipped: Vec<String>) -> Result<EvalReport> {
        if pieces.is_empty() {
            return Err(Error::arg("no pieces to evaluate"));
        }
        pieces.sort_by(|a, b| (&a.method, &a.piece).cmp(&(&b.method, &b.piece)));
        let mut groups: BTreeMap<&str, Vec<&Prf>> = BTreeMap::new();
        for p in &pieces {
            groups.entry(&p.method).or_default().push(&p.metrics);
        }
        let corpus = groups
            .into_iter()
            .map(|(method, rows)| {
                let col = |f: fn(&Prf) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
                let (p, r, f) = (col(|m| m.precision), col(|m| m.recall), col(|m| m.f_measure));
                MethodSummary {
                    method: method.to_string(),
                    pieces: rows.len(),
                    mean: Summary {
                        precision: mean(&p),
                        recall: mean(&r),
                        f_measure: mean(&f),
                    },
                    median: Summary {
                        precision: median(&p),
                        recall: median(&r),
                        f_measure: median(&f),
                    },
                }
            })
            .collect();
        Ok(EvalReport {
            pieces,
            corpus,
            skipped,
        })
    }

    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.corpus.iter().find(|s| s.method == method)
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<EvalReport> {
        Ok(serde_json::from_reader(input)?)
    }

    /// Per-piece rows as CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.pieces {
            w.serialize(CsvRow::from(p))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a report from [`EvalReport::write_csv`] output.
    pub fn read_csv<R: Read>(input: R) -> Result<EvalReport> {
        let mut r = csv::Reader::from_reader(input);
        let pieces = r
            .deserialize::<CsvRow>()
            .map(|row| row.map(PieceEval::from).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        EvalReport::from_pieces(pieces, Vec::new())
    }
}

// csv cannot serialize flattened structs
#[derive(Serialize, Deserialize)]
struct CsvRow {
    piece: String,
    method: String,
    precision: f64,
    recall: f64,
    f_measure: f64,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
}

impl From<&PieceEval> for CsvRow {
    fn from(p: &PieceEval) -> Self {
        let m = p.metrics;
        CsvRow {
            piece: p.piece.clone(),
            method: p.method.clone(),
            precision: m.precision,
            recall: m.recall,
            f_measure: m.f_measure,
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        }
    }
}

impl From<CsvRow> for PieceEval {
    fn from(r: CsvRow) -> Self {
        PieceEval {
            piece: r.piece,
            method: r.method,
            metrics: Prf {
                precision: r.precision,
                recall: r.recall,
                f_measure: r.f_measure,
                tp: r.tp,
                fp: r.fp,
                fn_: r.fn_,
            },
        }
    }
}

/// Scores every input and aggregates per method.
pub fn evaluate_corpus(pieces: &[PieceInput<'_>]) -> Result<EvalReport> {
    let rows = pieces
        .iter()
        .map(|p| {
            Ok(PieceEval {
                piece: p.piece.clone(),
                method: p.method.clone(),
                metrics: f_measure(p.score, &p.predicted, &p.truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_pieces(rows, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_io::Note;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> BTreeSet<NoteId> {
        v.iter().map(|&i| NoteId(i)).collect()
    }

    fn score(n: u32) -> Score {
        Score::new((0..n).map(|i| Note::new(i, 60 + i as u8, i as f64, 1.0)).collect(), 480).unwrap()
    }

    #[test]
    fn hand_computed() {
        let s = score(6);
        let m = f_measure(&s, &ids(&[0, 1, 5]), &ids(&[0, 1, 2, 3])).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (2, 1, 2));
        assert_eq!(m.precision, 2.0 / 3.0);
        assert_eq!(m.recall, 0.5);
        assert!((m.f_measure - 4.0 / 7.0).abs() < 1e-15);
        let perfect = f_measure(&s, &ids(&[1, 2]), &ids(&[1, 2])).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f_measure), (1.0, 1.0, 1.0));
        assert_eq!(f_measure(&s, &ids(&[]), &ids(&[1])).unwrap().f_measure, 0.0);
        assert!(f_measure(&s, &ids(&[9]), &ids(&[1])).is_err());
    }

    #[test]
    fn corpus_mean_and_median() {
        let s = score(2);
        let inputs = [
            PieceInput {
                piece: "b".into(),
                method: "skyline".into(),
                score: &s,
                predicted: ids(&[0]),
                truth: ids(&[0]),
            },
            PieceInput {
                piece: "a".into(),
                method: "skyline".into(),
                score: &s,
                predicted: ids(&[1]),
                truth: ids(&[0]),
            },
        ];
        let report = evaluate_corpus(&inputs).unwrap();
        assert_eq!(report.pieces[0].piece, "a");
        let sum = report.summary("skyline").unwrap();
        assert_eq!((sum.mean.f_measure, sum.median.f_measure, sum.pieces), (0.5, 0.5, 2));

        let one = evaluate_corpus(&inputs[..1]).unwrap();
        assert_eq!(one.corpus[0].mean.f_measure, one.pieces[0].metrics.f_measure);
        assert!(evaluate_corpus(&[]).is_err());

        let mut json = Vec::new();
        report.write_json(&mut json).unwrap();
        assert_eq!(EvalReport::read_json(&json[..]).unwrap(), report);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert!(csv.starts_with(b"piece,method,precision,recall,f_measure,tp,fp,fn\n"));
        assert_eq!(EvalReport::read_csv(&csv[..]).unwrap(), report);
    }

    #[test]
    fn external_melody_matching() {
        let s = Score::new(
            vec![Note::new(0, 60, 0.0, 1.0), Note::new(1, 72, 0.0, 1.0), Note::new(2, 72, 1.0, 1.0)],
            480,
        )
        .unwrap();
        let ext = Score::new(vec![Note::new(0, 72, 0.01, 0.5), Note::new(1, 72, 1.0, 2.0), Note::new(2, 50, 0.0, 1.0)], 96)
            .unwrap();
        assert_eq!(match_external(&s, &ext), ids(&[1, 2]));
    }

    proptest! {
        #[test]
        fn properties(pred in prop::collection::btree_set(0u32..20, 0..20), truth in prop::collection::btree_set(0u32..20, 0..20)) {
            let (p, t) = (ids(&pred.into_iter().collect::<Vec<_>>()), ids(&truth.into_iter().collect::<Vec<_>>()));
            let m = Prf::from_sets(&p, &t);
            for v in [m.precision, m.recall, m.f_measure] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(m.f_measure <= m.precision.max(m.recall) + 1e-15);
            prop_assert_eq!(m.f_measure == 0.0, m.tp == 0);
            let swapped = Prf::from_sets(&t, &p);
            prop_assert_eq!(swapped.precision, m.recall);
            prop_assert_eq!(swapped.recall, m.precision);
            prop_assert!((swapped.f_measure - m.f_measure).abs() < 1e-15);
        }
    }
}
