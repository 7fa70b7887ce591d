use ndarray::{Array1, Array2, Array4, ArrayView2, Axis, Zip};
use rand::Rng;

use super::layers::{bn_backward, bn_forward_eval, bn_forward_train, conv_backward, conv_forward, BnCache};
use super::params::ModelParams;
use crate::error::{Error, Result};

/// Running statistics momentum of batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward pass mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Batch statistics and inverted dropout with the given drop probability.
    Train { dropout: f64 },
    /// Running statistics, no dropout. Deterministic.
    Eval,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn relu_inplace(a: &mut Array4<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn dropout_mask<R: Rng + ?Sized>(dim: ndarray::Dim<[usize; 4]>, p: f64, rng: &mut R) -> Array4<f64> {
    let keep = 1.0 / (1.0 - p);
    Array4::from_shape_simple_fn(dim, || if rng.gen::<f64>() < p { 0.0 } else { keep })
}

struct Trace {
    input: Array4<f64>,
    y1: Array4<f64>,
    bn1: Option<BnCache>,
    mask1: Option<Array4<f64>>,
    a1: Array4<f64>,
    y2: Array4<f64>,
    bn2: Option<BnCache>,
    mask2: Option<Array4<f64>>,
    a2: Array4<f64>,
    out: Array4<f64>,
}

fn stack(params: &ModelParams, windows: &[ArrayView2<'_, f64>]) -> Result<Array4<f64>> {
    let (h, w) = (params.arch.height, params.arch.width);
    if windows.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let mut x = Array4::zeros((windows.len(), 1, h, w));
    for (i, win) in windows.iter().enumerate() {
        if win.dim() != (h, w) {
            return Err(Error::arg(format!("window shape {:?}, expected ({h}, {w})", win.dim())));
        }
        x.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(win);
    }
    Ok(x)
}

fn run<R: Rng + ?Sized>(params: &ModelParams, input: Array4<f64>, mode: Mode, rng: &mut R) -> Result<Trace> {
    params.check_finite()?;
    let dropout = match mode {
        Mode::Train { dropout } if !(0.0..1.0).contains(&dropout) => {
            return Err(Error::arg(format!("dropout probability {dropout} outside [0, 1)")));
        }
        Mode::Train { dropout } => dropout,
        Mode::Eval => 0.0,
    };
    let train = matches!(mode, Mode::Train { .. });

    let normalize = |c: &Array4<f64>, bn: &super::params::BatchNorm| {
        if train {
            let (y, cache) = bn_forward_train(c, &bn.gamma, &bn.beta);
            (y, Some(cache))
        } else {
            (bn_forward_eval(c, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var), None)
        }
    };

    let c1 = conv_forward(&input, &params.conv1);
    let (y1, bn1) = normalize(&c1, &params.bn1);
    drop(c1);
    let mut a1 = y1.clone();
    relu_inplace(&mut a1);
    let mask1 = (dropout > 0.0).then(|| dropout_mask(a1.raw_dim(), dropout, rng));
    if let Some(m) = &mask1 {
        a1 *= m;
    }

    let c2 = conv_forward(&a1, &params.conv2);
    let (y2, bn2) = normalize(&c2, &params.bn2);
    drop(c2);
    let mut a2 = y2.clone();
    relu_inplace(&mut a2);
    let mask2 = (dropout > 0.0).then(|| dropout_mask(a2.raw_dim(), dropout, rng));
    if let Some(m) = &mask2 {
        a2 *= m;
    }

    let mut out = conv_forward(&a2, &params.head);
    out.mapv_inplace(sigmoid);
    Ok(Trace {
        input,
        y1,
        bn1,
        mask1,
        a1,
        y2,
        bn2,
        mask2,
        a2,
        out,
    })
}

/// Map one window to a same-shape melody probability map.
pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    window: ArrayView2<'_, f64>,
    mode: Mode,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let x = stack(params, &[window])?;
    let t = run(params, x, mode, rng)?;
    Ok(t.out.index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0))
}

/// Eval-mode forward pass over several windows.
pub fn forward_eval(params: &ModelParams, windows: &[ArrayView2<'_, f64>]) -> Result<Vec<Array2<f64>>> {
    // eval mode draws no random numbers
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut out = Vec::with_capacity(windows.len());
    // one window at a time bounds the activation memory
    for w in windows {
        let x = stack(params, std::slice::from_ref(w))?;
        let t = run(params, x, Mode::Eval, &mut rng)?;
        out.push(t.out.index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0));
    }
    Ok(out)
}

/// Batch statistics `(mean, unbiased variance)` per normalization layer.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub bn1: (Array1<f64>, Array1<f64>),
    pub bn2: (Array1<f64>, Array1<f64>),
}

#[derive(Debug, Clone)]
pub struct LossAndGrad {
    /// Mean squared error plus the L1 penalty.
    pub loss: f64,
    /// Mean squared error alone.
    pub mse: f64,
    pub grads: ModelParams,
    pub stats: BatchStats,
}

/// Objective knobs of [`loss_and_grad`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub dropout: f64,
    pub l1: f64,
}

fn l1_subgradient(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn unbiased(cache: &BnCache, count: usize) -> (Array1<f64>, Array1<f64>) {
    let m = count as f64;
    let scale = if count > 1 { m / (m - 1.0) } else { 1.0 };
    (cache.mean.clone(), cache.var.mapv(|v| v * scale))
}

/// Training-mode loss and its gradient over a batch of `(input, target)` windows.
pub fn loss_and_grad<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[(ArrayView2<'_, f64>, ArrayView2<'_, f64>)],
    objective: Objective,
    rng: &mut R,
) -> Result<LossAndGrad> {
    if batch.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let inputs: Vec<_> = batch.iter().map(|(x, _)| *x).collect();
    let targets: Vec<_> = batch.iter().map(|(_, t)| *t).collect();
    let x = stack(params, &inputs)?;
    let t = stack(params, &targets)?;
    let trace = run(params, x, Mode::Train { dropout: objective.dropout }, rng)?;

    let (n, _, h, w) = trace.out.dim();
    let count = (n * h * w) as f64;
    let mse = Zip::from(&trace.out)
        .and(&t)
        .fold(0.0, |acc, &o, &y| acc + (o - y) * (o - y))
        / count;
    let loss = mse + objective.l1 * params.l1_norm();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }

    let mut dz = Array4::zeros(trace.out.raw_dim());
    Zip::from(&mut dz)
        .and(&trace.out)
        .and(&t)
        .for_each(|d, &o, &y| *d = 2.0 * (o - y) / count * o * (1.0 - o));

    let mut grads = params.zeros_like();
    let (dhead, da2) = conv_backward(&trace.a2, &params.head, &dz, true);
    grads.head = dhead;

    let bn2 = trace.bn2.as_ref().expect("training trace");
    let mut dy2 = da2.expect("input gradient requested");
    if let Some(m) = &trace.mask2 {
        dy2 *= m;
    }
    Zip::from(&mut dy2).and(&trace.y2).for_each(|d, &y| {
        if y <= 0.0 {
            *d = 0.0
        }
    });
    let (dc2, dg2, db2) = bn_backward(&dy2, bn2, &params.bn2.gamma);
    drop(dy2);
    grads.bn2.gamma = dg2;
    grads.bn2.beta = db2;
    let (dconv2, da1) = conv_backward(&trace.a1, &params.conv2, &dc2, true);
    grads.conv2 = dconv2;

    let bn1 = trace.bn1.as_ref().expect("training trace");
    let mut dy1 = da1.expect("input gradient requested");
    if let Some(m) = &trace.mask1 {
        dy1 *= m;
    }
    Zip::from(&mut dy1).and(&trace.y1).for_each(|d, &y| {
        if y <= 0.0 {
            *d = 0.0
        }
    });
    let (dc1, dg1, db1) = bn_backward(&dy1, bn1, &params.bn1.gamma);
    grads.bn1.gamma = dg1;
    grads.bn1.beta = db1;
    let (dconv1, _) = conv_backward(&trace.input, &params.conv1, &dc1, false);
    grads.conv1 = dconv1;

    if objective.l1 > 0.0 {
        for (g, w) in [
            (&mut grads.conv1.weight, &params.conv1.weight),
            (&mut grads.conv2.weight, &params.conv2.weight),
            (&mut grads.head.weight, &params.head.weight),
        ] {
            Zip::from(g).and(w).for_each(|g, &w| *g += objective.l1 * l1_subgradient(w));
        }
    }

    let per_channel = n * h * w;
    Ok(LossAndGrad {
        loss,
        mse,
        grads,
        stats: BatchStats {
            bn1: unbiased(bn1, per_channel),
            bn2: unbiased(bn2, per_channel),
        },
    })
}

/// Eval-mode mean squared error over `(input, target)` windows.
pub fn eval_mse(params: &ModelParams, pairs: &[(ArrayView2<'_, f64>, ArrayView2<'_, f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::arg("no windows to evaluate"));
    }
    let inputs: Vec<_> = pairs.iter().map(|(x, _)| *x).collect();
    let outs = forward_eval(params, &inputs)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (o, (_, t)) in outs.iter().zip(pairs) {
        sum += Zip::from(o).and(t).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
        count += o.len();
    }
    Ok(sum / count as f64)
}

impl ModelParams {
    /// Exponential moving average of batch statistics into the running ones.
    pub fn update_running_stats(&mut self, stats: &BatchStats, momentum: f64) {
        for (bn, (mean, var)) in [(&mut self.bn1, &stats.bn1), (&mut self.bn2, &stats.bn2)] {
            Zip::from(&mut bn.running_mean)
                .and(mean)
                .for_each(|r, &m| *r = (1.0 - momentum) * *r + momentum * m);
            Zip::from(&mut bn.running_var)
                .and(var)
                .for_each(|r, &v| *r = (1.0 - momentum) * *r + momentum * v);
        }
    }
}
