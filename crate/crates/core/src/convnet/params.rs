use ndarray::{Array1, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pianoroll::{PITCHES, WINDOW_WIDTH};

/// Shape of the fully-convolutional network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Kernels per convolutional layer.
    pub channels: usize,
    /// Kernel extent along pitch.
    pub kernel_h: usize,
    /// Kernel extent along time.
    pub kernel_w: usize,
    /// Input rows.
    pub height: usize,
    /// Input columns.
    pub width: usize,
}

impl Default for Architecture {
    /// 21 kernels of 32 x 16 over 128 x 64 windows.
    fn default() -> Self {
        Architecture {
            channels: 21,
            kernel_h: 32,
            kernel_w: 16,
            height: PITCHES,
            width: WINDOW_WIDTH,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.kernel_h == 0 || self.kernel_w == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::arg(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Weights and bias of one convolution, weight laid out `[out, in, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvLayer {
    fn zeros(out: usize, inp: usize, kh: usize, kw: usize) -> Self {
        ConvLayer {
            weight: Array4::zeros((out, inp, kh, kw)),
            bias: Array1::zeros(out),
        }
    }

    fn glorot<R: Rng + ?Sized>(out: usize, inp: usize, kh: usize, kw: usize, rng: &mut R) -> Self {
        let fan_in = (inp * kh * kw) as f64;
        let fan_out = (out * kh * kw) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        ConvLayer {
            weight: Array4::from_shape_simple_fn((out, inp, kh, kw), || rng.gen_range(-limit..limit)),
            bias: Array1::zeros(out),
        }
    }
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    fn zeros(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::zeros(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::zeros(channels),
        }
    }
}

/// All tensors of the network. Also used as the gradient container, in
/// which case the running statistics are unused and stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub conv1: ConvLayer,
    pub bn1: BatchNorm,
    pub conv2: ConvLayer,
    pub bn2: BatchNorm,
    /// 1x1 convolution collapsing the channels to one probability map.
    pub head: ConvLayer,
}

impl ModelParams {
    /// Glorot-uniform kernels, zero biases, identity batch normalization.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let c = arch.channels;
        ModelParams {
            arch,
            conv1: ConvLayer::glorot(c, 1, arch.kernel_h, arch.kernel_w, rng),
            bn1: BatchNorm::identity(c),
            conv2: ConvLayer::glorot(c, c, arch.kernel_h, arch.kernel_w, rng),
            bn2: BatchNorm::identity(c),
            head: ConvLayer::glorot(1, c, 1, 1, rng),
        }
    }

    /// All kernels and biases zero; batch normalization is the identity map
    /// (`gamma = 1`, `beta = 0`, running mean 0, running variance 1).
    pub fn zero_init(arch: Architecture) -> Self {
        let mut p = Self::zeros_like_arch(arch);
        p.bn1 = BatchNorm::identity(arch.channels);
        p.bn2 = BatchNorm::identity(arch.channels);
        p
    }

    fn zeros_like_arch(arch: Architecture) -> Self {
        let c = arch.channels;
        ModelParams {
            arch,
            conv1: ConvLayer::zeros(c, 1, arch.kernel_h, arch.kernel_w),
            bn1: BatchNorm::zeros(c),
            conv2: ConvLayer::zeros(c, c, arch.kernel_h, arch.kernel_w),
            bn2: BatchNorm::zeros(c),
            head: ConvLayer::zeros(1, c, 1, 1),
        }
    }

    /// Every tensor zero, including the batch normalization scales.
    pub fn zeros_like(&self) -> Self {
        Self::zeros_like_arch(self.arch)
    }

    /// Learnable tensors in a fixed order.
    pub fn learnable(&self) -> [(&'static str, &[f64]); 10] {
        [
            ("conv1.weight", slice(self.conv1.weight.as_slice())),
            ("conv1.bias", slice(self.conv1.bias.as_slice())),
            ("bn1.gamma", slice(self.bn1.gamma.as_slice())),
            ("bn1.beta", slice(self.bn1.beta.as_slice())),
            ("conv2.weight", slice(self.conv2.weight.as_slice())),
            ("conv2.bias", slice(self.conv2.bias.as_slice())),
            ("bn2.gamma", slice(self.bn2.gamma.as_slice())),
            ("bn2.beta", slice(self.bn2.beta.as_slice())),
            ("head.weight", slice(self.head.weight.as_slice())),
            ("head.bias", slice(self.head.bias.as_slice())),
        ]
    }

    pub fn learnable_mut(&mut self) -> [(&'static str, &mut [f64]); 10] {
        [
            ("conv1.weight", slice_mut(self.conv1.weight.as_slice_mut())),
            ("conv1.bias", slice_mut(self.conv1.bias.as_slice_mut())),
            ("bn1.gamma", slice_mut(self.bn1.gamma.as_slice_mut())),
            ("bn1.beta", slice_mut(self.bn1.beta.as_slice_mut())),
            ("conv2.weight", slice_mut(self.conv2.weight.as_slice_mut())),
            ("conv2.bias", slice_mut(self.conv2.bias.as_slice_mut())),
            ("bn2.gamma", slice_mut(self.bn2.gamma.as_slice_mut())),
            ("bn2.beta", slice_mut(self.bn2.beta.as_slice_mut())),
            ("head.weight", slice_mut(self.head.weight.as_slice_mut())),
            ("head.bias", slice_mut(self.head.bias.as_slice_mut())),
        ]
    }

    /// Running statistics, in a fixed order.
    pub fn running_stats(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("bn1.running_mean", slice(self.bn1.running_mean.as_slice())),
            ("bn1.running_var", slice(self.bn1.running_var.as_slice())),
            ("bn2.running_mean", slice(self.bn2.running_mean.as_slice())),
            ("bn2.running_var", slice(self.bn2.running_var.as_slice())),
        ]
    }

    pub fn running_stats_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
        [
            ("bn1.running_mean", slice_mut(self.bn1.running_mean.as_slice_mut())),
            ("bn1.running_var", slice_mut(self.bn1.running_var.as_slice_mut())),
            ("bn2.running_mean", slice_mut(self.bn2.running_mean.as_slice_mut())),
            ("bn2.running_var", slice_mut(self.bn2.running_var.as_slice_mut())),
        ]
    }

    /// Sum of absolute kernel weights (biases and normalization excluded).
    pub fn l1_norm(&self) -> f64 {
        [&self.conv1.weight, &self.conv2.weight, &self.head.weight]
            .iter()
            .map(|w| w.iter().map(|v| v.abs()).sum::<f64>())
            .sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        let all = self.learnable().into_iter().chain(self.running_stats());
        for (name, values) in all {
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("parameter {name} holds {v}")));
            }
        }
        Ok(())
    }
}

// Tensors are created in standard layout and never re-strided.
fn slice(s: Option<&[f64]>) -> &[f64] {
    s.expect("parameter tensors are contiguous")
}

fn slice_mut(s: Option<&mut [f64]>) -> &mut [f64] {
    s.expect("parameter tensors are contiguous")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_architecture_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(Architecture::default(), &mut rng);
        assert_eq!(p.conv1.weight.dim(), (21, 1, 32, 16));
        assert_eq!(p.conv2.weight.dim(), (21, 21, 32, 16));
        assert_eq!(p.head.weight.dim(), (1, 21, 1, 1));
        assert_eq!(p.bn2.gamma.len(), 21);
        assert_eq!(p.parameter_count(), 21 * 512 + 21 + 21 * 21 * 512 + 21 + 4 * 21 + 21 + 1);
        p.check_finite().unwrap();
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let p = ModelParams::init(Architecture::default(), &mut rng);
        let limit = (6.0f64 / (21.0 * 512.0 * 2.0)).sqrt();
        assert!(p.conv2.weight.iter().all(|w| w.abs() < limit));
    }

    #[test]
    fn non_finite_is_reported() {
        let mut p = ModelParams::zero_init(Architecture::default());
        p.bn2.running_var[3] = f64::NAN;
        assert!(matches!(p.check_finite(), Err(Error::Numeric(_))));
    }
}
