//! Fully-convolutional melody network.
//!
//! ```text
//! window [1 x 128 x 64]
//!   -> conv 21 @ 32x16 (same) -> batchnorm -> relu -> dropout
//!   -> conv 21 @ 32x16 (same) -> batchnorm -> relu -> dropout
//!   -> conv 1 @ 1x1 -> sigmoid
//!   -> probabilities [128 x 64]
//! ```
//!
//! Trained on mean squared error with an L1 weight penalty using AdaDelta.

pub mod checkpoint;
mod layers;
mod network;
mod optim;
mod params;
mod train;

pub use network::{eval_mse, forward, forward_eval, loss_and_grad, BatchStats, LossAndGrad, Mode, Objective, BN_MOMENTUM};
pub use optim::{adadelta_step, AdaDeltaConfig, OptimizerState};
pub use params::{Architecture, BatchNorm, ConvLayer, ModelParams};
pub use train::{
    augment, train, train_with_progress, transpose_melody, write_history, EpochRecord, TrainConfig, TrainOutcome,
    TrainingPiece,
};
