//! AdaDelta.
//!
//! Per parameter, with decay `rho` and stability constant `eps`:
//!
//! ```text
//! E[g²]  <- rho E[g²] + (1 - rho) g²
//! u       = sqrt(E[Δ²] + eps) / sqrt(E[g²] + eps) * g
//! E[Δ²]  <- rho E[Δ²] + (1 - rho) u²
//! θ      <- θ - lr * u
//! ```

use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaDeltaConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdaDeltaConfig {
    fn default() -> Self {
        AdaDeltaConfig {
            lr: 1.0,
            rho: 0.95,
            eps: 1e-6,
        }
    }
}

/// Squared-gradient and squared-update accumulators, one pair per learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdaDeltaConfig,
    pub sq_grad: Vec<Vec<f64>>,
    pub sq_update: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdaDeltaConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.learnable().iter().map(|(_, s)| vec![0.0; s.len()]).collect();
        OptimizerState {
            config,
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }

    /// Apply one update in place.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        let grads = grads.learnable();
        for (name, g) in &grads {
            if let Some(v) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient {name} holds {v}")));
            }
        }
        let AdaDeltaConfig { lr, rho, eps } = self.config;
        for (i, ((name, theta), (_, g))) in params.learnable_mut().into_iter().zip(grads).enumerate() {
            if theta.len() != g.len() || self.sq_grad[i].len() != g.len() {
                return Err(Error::arg(format!("shape mismatch for {name}")));
            }
            let eg = &mut self.sq_grad[i];
            let ed = &mut self.sq_update[i];
            for j in 0..g.len() {
                eg[j] = rho * eg[j] + (1.0 - rho) * g[j] * g[j];
                let u = (ed[j] + eps).sqrt() / (eg[j] + eps).sqrt() * g[j];
                ed[j] = rho * ed[j] + (1.0 - rho) * u * u;
                theta[j] -= lr * u;
            }
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::step`].
pub fn adadelta_step(
    state: &OptimizerState,
    params: &ModelParams,
    grads: &ModelParams,
) -> Result<(ModelParams, OptimizerState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.step(&mut p, grads)?;
    Ok((p, s))
}
