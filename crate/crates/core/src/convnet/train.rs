use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Zip};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{eval_mse, loss_and_grad, Objective, BN_MOMENTUM};
use super::optim::{AdaDeltaConfig, OptimizerState};
use super::params::{Architecture, ModelParams};
use crate::error::{Error, Result};
use crate::pianoroll::{cut_grid, quantize, PITCHES, WINDOW_WIDTH};
use crate::score_io::Score;

/// Every knob of a training run. Serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub dropout: f64,
    pub l1: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub optimizer: AdaDeltaConfig,
    /// Fraction of pieces held out for validation (at least one piece).
    pub validation_fraction: f64,
    /// Add transposed-melody copies of training pieces.
    pub augment: bool,
    /// Wall-clock seconds in the history; when off, `elapsed_s` is 0.
    pub record_elapsed: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Architecture::default(),
            dropout: 0.3,
            l1: 1e-5,
            batch_size: 16,
            patience: 20,
            max_epochs: 500,
            seed: 0,
            optimizer: AdaDeltaConfig::default(),
            validation_fraction: 0.1,
            augment: true,
            record_elapsed: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.l1 >= 0.0) {
            return Err(Error::arg(format!("negative L1 coefficient {}", self.l1)));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::arg("patience must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::arg("validation fraction outside [0, 1)"));
        }
        Ok(())
    }

    fn objective(&self) -> Objective {
        Objective {
            dropout: self.dropout,
            l1: self.l1,
        }
    }
}

/// A full-length input roll and its melody-only target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPiece {
    pub name: String,
    pub input: Array2<f64>,
    pub target: Array2<f64>,
}

impl TrainingPiece {
    /// Needs a score with a melody annotation.
    pub fn from_score(name: impl Into<String>, score: &Score) -> Result<Self> {
        let name = name.into();
        let melody = score
            .melody_ids()
            .ok_or_else(|| Error::arg(format!("piece {name} has no melody annotation")))?;
        let roll = quantize(score)?;
        Ok(TrainingPiece {
            input: roll.grid().clone(),
            target: roll.subset_grid(melody),
            name,
        })
    }
}

/// Transposed copy: melody pixels moved by `shift` rows in input and target,
/// pixels leaving the pitch range dropped, accompaniment untouched.
pub fn transpose_melody(piece: &TrainingPiece, shift: isize) -> TrainingPiece {
    let rows = piece.target.nrows() as isize;
    let mut accompaniment = piece.input.clone();
    Zip::from(&mut accompaniment).and(&piece.target).for_each(|a, &t| {
        if t > 0.0 {
            *a = 0.0
        }
    });
    let mut target = Array2::zeros(piece.target.raw_dim());
    for r in 0..rows {
        let dst = r + shift;
        if (0..rows).contains(&dst) {
            target.row_mut(dst as usize).assign(&piece.target.row(r as usize));
        }
    }
    let mut input = accompaniment;
    Zip::from(&mut input).and(&target).for_each(|a, &t| *a = a.max(t));
    TrainingPiece {
        name: format!("{}{:+}", piece.name, shift),
        input,
        target,
    }
}

/// Grow a dataset by half: `floor(n / 2)` distinct pieces are copied with
/// the melody transposed down two octaves or up one octave (equal odds).
pub fn augment<R: Rng + ?Sized>(dataset: &[TrainingPiece], rng: &mut R) -> Vec<TrainingPiece> {
    let n = dataset.len();
    let mut out = dataset.to_vec();
    let mut chosen = index::sample(rng, n, n / 2).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let shift = if rng.gen_bool(0.5) { -24 } else { 12 };
        out.push(transpose_melody(&dataset[i], shift));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    /// Validation loss of the initial parameters.
    pub initial_val_loss: f64,
    pub train_pieces: Vec<String>,
    pub validation_pieces: Vec<String>,
}

/// History as JSON lines, one record per epoch.
pub fn write_history<W: Write>(history: &[EpochRecord], mut out: W) -> Result<()> {
    for rec in history {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

type WindowPair = (Array2<f64>, Array2<f64>);

fn windows_of(pieces: &[TrainingPiece]) -> Vec<WindowPair> {
    let mut out = Vec::new();
    for p in pieces {
        let xs = cut_grid(p.input.view());
        let ts = cut_grid(p.target.view());
        out.extend(xs.into_iter().zip(ts).map(|(x, t)| (x.data, t.data)));
    }
    out
}

fn check_arch(arch: &Architecture) -> Result<()> {
    if (arch.height, arch.width) != (PITCHES, WINDOW_WIDTH) {
        return Err(Error::arg(format!(
            "training needs a {PITCHES}x{WINDOW_WIDTH} input architecture, got {}x{}",
            arch.height, arch.width
        )));
    }
    Ok(())
}

fn views(pairs: &[WindowPair]) -> Vec<(ArrayView2<'_, f64>, ArrayView2<'_, f64>)> {
    pairs.iter().map(|(x, t)| (x.view(), t.view())).collect()
}

pub fn train(dataset: &[TrainingPiece], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(dataset, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    dataset: &[TrainingPiece],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_arch(&config.arch)?;
    if dataset.len() < 2 {
        return Err(Error::arg(format!(
            "training needs at least 2 pieces, got {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(config.arch, &mut rng);

    // split by piece before augmenting so no transposed copy of a
    // validation piece lands in the training set
    let n = dataset.len();
    let n_val = ((config.validation_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let val_pieces: Vec<TrainingPiece> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let mut train_pieces: Vec<TrainingPiece> = train_idx.iter().map(|&i| dataset[i].clone()).collect();
    if config.augment {
        train_pieces = augment(&train_pieces, &mut rng);
    }

    let train_windows = windows_of(&train_pieces);
    let val_windows = windows_of(&val_pieces);
    let val_views = views(&val_windows);

    let val_loss = |p: &ModelParams| -> Result<f64> { Ok(eval_mse(p, &val_views)? + config.l1 * p.l1_norm()) };
    let initial_val_loss = val_loss(&params)?;

    let mut outcome = TrainOutcome {
        params: params.clone(),
        history: Vec::new(),
        best_epoch: 0,
        initial_val_loss,
        train_pieces: train_pieces.iter().map(|p| p.name.clone()).collect(),
        validation_pieces: val_pieces.iter().map(|p| p.name.clone()).collect(),
    };
    if config.max_epochs == 0 {
        return Ok(outcome);
    }

    let mut optimizer = OptimizerState::new(&params, config.optimizer);
    let objective = config.objective();
    let started = Instant::now();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train_windows.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (train_windows[i].0.view(), train_windows[i].1.view()))
                .collect();
            let lg = loss_and_grad(&params, &batch, objective, &mut rng)?;
            optimizer.step(&mut params, &lg.grads)?;
            params.update_running_stats(&lg.stats, BN_MOMENTUM);
            weighted += lg.loss * chunk.len() as f64;
        }
        let train_loss = weighted / train_windows.len() as f64;
        let val = val_loss(&params)?;
        if !train_loss.is_finite() || !val.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: train loss {train_loss}, validation loss {val}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: val,
            elapsed_s: if config.record_elapsed {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        progress(&record);
        outcome.history.push(record);
        if val < best {
            best = val;
            since_best = 0;
            outcome.params = params.clone();
            outcome.best_epoch = epoch;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn piece(name: &str, melody_row: usize, accomp_row: usize, cols: usize) -> TrainingPiece {
        let mut input = Array2::zeros((128, cols));
        let mut target = Array2::zeros((128, cols));
        for c in 0..cols {
            input[[melody_row, c]] = 1.0;
            target[[melody_row, c]] = 1.0;
            input[[accomp_row, c]] = 1.0;
        }
        TrainingPiece {
            name: name.into(),
            input,
            target,
        }
    }

    #[test]
    fn transposition_moves_only_melody() {
        let p = piece("a", 60, 40, 8);
        let down = transpose_melody(&p, -24);
        assert_eq!(down.target.row(36).sum(), 8.0);
        assert_eq!(down.target.row(60).sum(), 0.0);
        assert_eq!(down.input.row(36).sum(), 8.0);
        assert_eq!(down.input.row(40).sum(), 8.0);
        assert_eq!(down.input.row(60).sum(), 0.0);
        let off = transpose_melody(&piece("b", 120, 40, 8), 12);
        assert_eq!(off.target.sum(), 0.0);
        assert_eq!(off.input.sum(), 8.0);
    }

    #[test]
    fn augmentation_adds_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let two = vec![piece("a", 60, 40, 8), piece("b", 70, 40, 8)];
        let out = augment(&two, &mut rng);
        assert_eq!(out.len(), 3);
        let shifted = &out[2];
        let row = (0..128).find(|&r| shifted.target.row(r).sum() > 0.0).unwrap();
        assert!([36, 72, 46, 82].contains(&row), "row {row}");
        assert_eq!(augment(&two[..1], &mut rng).len(), 1);
        assert_eq!(augment(&vec![two[0].clone(); 7], &mut rng).len(), 10);
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            arch: Architecture {
                channels: 2,
                kernel_h: 4,
                kernel_w: 3,
                height: 128,
                width: 64,
            },
            batch_size: 4,
            max_epochs: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_return_initial_params() {
        let data = vec![piece("a", 60, 40, 16), piece("b", 64, 40, 16)];
        let cfg = TrainConfig {
            max_epochs: 0,
            ..tiny_config()
        };
        let out = train(&data, &cfg).unwrap();
        assert!(out.history.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        assert_eq!(out.params, ModelParams::init(cfg.arch, &mut rng));
    }

    #[test]
    fn one_piece_is_not_enough() {
        assert!(matches!(
            train(&[piece("a", 60, 40, 16)], &tiny_config()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn equal_seeds_give_identical_history() {
        let data = vec![piece("a", 60, 40, 40), piece("b", 64, 40, 40), piece("c", 67, 43, 40)];
        let cfg = TrainConfig {
            record_elapsed: false,
            ..tiny_config()
        };
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        let mut buf = Vec::new();
        write_history(&a.history, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn returned_params_are_the_best_epoch() {
        let data = vec![piece("a", 60, 40, 40), piece("b", 64, 40, 40), piece("c", 67, 43, 40)];
        let cfg = TrainConfig {
            max_epochs: 6,
            patience: 2,
            ..tiny_config()
        };
        let out = train(&data, &cfg).unwrap();
        let min = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.history[out.best_epoch - 1].val_loss, min);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let data = vec![piece("a", 60, 40, 16), piece("b", 64, 40, 16)];
        for cfg in [
            TrainConfig { dropout: 1.0, ..tiny_config() },
            TrainConfig { patience: 0, ..tiny_config() },
            TrainConfig { batch_size: 0, ..tiny_config() },
        ] {
            assert!(matches!(train(&data, &cfg), Err(Error::Argument(_))));
        }
    }
}
