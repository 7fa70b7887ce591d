//! Flat key-value run configuration.
//!
//! The file is TOML without tables, e.g.
//!
//! ```toml
//! corpus = "data/train"
//! checkpoint = "runs/a/model.ck"
//! method = "cnn_mono"
//! seed = 7
//! channels = 21
//! max_epochs = 200
//! ```
//!
//! Command-line flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use melody_core::convnet::TrainConfig;
use serde::Deserialize;

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub melody_track: Option<usize>,
    pub iterations: Option<usize>,
    pub no_elapsed: Option<bool>,
    pub scale: Option<f64>,
    pub melody_color: Option<String>,
    pub accompaniment_color: Option<String>,

    pub channels: Option<usize>,
    pub kernel_h: Option<usize>,
    pub kernel_w: Option<usize>,
    pub dropout: Option<f64>,
    pub l1: Option<f64>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub max_epochs: Option<usize>,
    pub validation_fraction: Option<f64>,
    pub augment: Option<bool>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut c = TrainConfig::default();
        macro_rules! set {
            ($($field:ident).+ <- $value:expr) => {
                if let Some(v) = $value {
                    c.$($field).+ = v;
                }
            };
        }
        set!(arch.channels <- self.channels);
        set!(arch.kernel_h <- self.kernel_h);
        set!(arch.kernel_w <- self.kernel_w);
        set!(dropout <- self.dropout);
        set!(l1 <- self.l1);
        set!(batch_size <- self.batch_size);
        set!(patience <- self.patience);
        set!(max_epochs <- self.max_epochs);
        set!(validation_fraction <- self.validation_fraction);
        set!(augment <- self.augment);
        set!(seed <- self.seed);
        if self.no_elapsed == Some(true) {
            c.record_elapsed = false;
        }
        c
    }
}
