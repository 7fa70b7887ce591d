//! Analytic gradients against central finite differences on a shrunken
//! network (2 kernels of 4x3, 8x8 inputs, dropout off, f64).

use melody_core::convnet::{loss_and_grad, Architecture, ModelParams, Objective};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn shrunken() -> Architecture {
    Architecture {
        channels: 2,
        kernel_h: 4,
        kernel_w: 3,
        height: 8,
        width: 8,
    }
}

/// Largest relative error over all learnable parameters.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// parameters whose true gradient vanishes (conv biases feeding a batch
/// normalization) from dividing rounding noise by zero.
fn max_relative_error(seed: u64, l1: f64, floor: f64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(shrunken(), &mut rng);
    // non-trivial normalization parameters
    for g in params.bn1.gamma.iter_mut().chain(params.bn2.gamma.iter_mut()) {
        *g = rng.gen_range(0.5..1.5);
    }
    for b in params.bn1.beta.iter_mut().chain(params.bn2.beta.iter_mut()) {
        *b = rng.gen_range(-0.3..0.3);
    }
    params.head.bias[0] = 0.1;
    let batch: Vec<(Array2<f64>, Array2<f64>)> = (0..3)
        .map(|_| {
            let x = Array2::from_shape_simple_fn((8, 8), || (rng.gen::<f64>() < 0.3) as u8 as f64);
            let t = Array2::from_shape_fn((8, 8), |(r, c)| if x[[r, c]] > 0.0 && r > 4 { 1.0 } else { 0.0 });
            (x, t)
        })
        .collect();
    let views: Vec<_> = batch.iter().map(|(x, t)| (x.view(), t.view())).collect();
    let objective = Objective { dropout: 0.0, l1 };
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let analytic = loss_and_grad(&params, &views, objective, &mut unused).unwrap().grads;
    let loss = |p: &ModelParams| loss_and_grad(p, &views, objective, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().loss;

    let mut worst = (0.0, String::new());
    let names: Vec<&str> = params.learnable().iter().map(|(n, _)| *n).collect();
    for (t, name) in names.iter().enumerate() {
        let len = params.learnable()[t].1.len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.learnable_mut()[t].1[i] += STEP;
            let mut minus = params.clone();
            minus.learnable_mut()[t].1[i] -= STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            let a = analytic.learnable()[t].1[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for seed in [1, 2] {
        let (err, at) = max_relative_error(seed, 0.0, 1e-8);
        assert!(err <= 1e-3, "seed {seed}: max relative error {err:e} at {at}");
    }
}

#[test]
fn gradients_with_l1_match_finite_differences() {
    let (err, at) = max_relative_error(3, 1e-3, 1e-8);
    assert!(err <= 1e-3, "max relative error {err:e} at {at}");
}
