//! Same-padded 2-D convolution and batch normalization over `[N, C, H, W]`
//! batches.
//!
//! A kernel of extent `kh x kw` reads input rows `y - (kh-1)/2 .. y + kh/2`
//! and columns `x - (kw-1)/2 .. x + kw/2`, zero outside the input.
//!
//! The convolution unfolds only the time axis: for every input channel and
//! kernel column a row of `(H + kh - 1) * W` values is laid out so that
//! kernel row `dy` reads the contiguous column range `dy*W .. dy*W + H*W`.
//! A layer then costs `kh` matrix products.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayViewMut3, Axis};

use super::params::ConvLayer;

pub(crate) const BN_EPS: f64 = 1e-5;

fn pads(kh: usize, kw: usize) -> (usize, usize) {
    ((kh - 1) / 2, (kw - 1) / 2)
}

/// Time-unfolded input, `[cin * kw, (h + kh - 1) * w]`.
fn unfold(x: ArrayView3<'_, f64>, kh: usize, kw: usize) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let (ph, pw) = pads(kh, kw);
    let mut col = Array2::zeros((cin * kw, (h + kh - 1) * w));
    for ci in 0..cin {
        for dx in 0..kw {
            let shift = dx as isize - pw as isize;
            let lo = (-shift).max(0) as usize;
            let hi = (w as isize - shift).min(w as isize).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let mut row = col.row_mut(ci * kw + dx);
            for y in 0..h {
                let base = (y + ph) * w;
                let src_lo = (lo as isize + shift) as usize;
                row.slice_mut(s![base + lo..base + hi])
                    .assign(&x.slice(s![ci, y, src_lo..src_lo + (hi - lo)]));
            }
        }
    }
    col
}

/// Adjoint of [`unfold`]: accumulate a column gradient into an input gradient.
fn fold(col: &Array2<f64>, mut dx_out: ArrayViewMut3<'_, f64>, kh: usize, kw: usize) {
    let (cin, h, w) = dx_out.dim();
    let (ph, pw) = pads(kh, kw);
    for ci in 0..cin {
        for dx in 0..kw {
            let shift = dx as isize - pw as isize;
            let lo = (-shift).max(0) as usize;
            let hi = (w as isize - shift).min(w as isize).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let row = col.row(ci * kw + dx);
            for y in 0..h {
                let base = (y + ph) * w;
                let src_lo = (lo as isize + shift) as usize;
                let mut dst = dx_out.slice_mut(s![ci, y, src_lo..src_lo + (hi - lo)]);
                dst += &row.slice(s![base + lo..base + hi]);
            }
        }
    }
}

/// Kernel regrouped as `[kh, cout, cin * kw]`.
fn regroup(weight: &Array4<f64>) -> Array3<f64> {
    let (cout, cin, kh, kw) = weight.dim();
    Array3::from_shape_fn((kh, cout, cin * kw), |(dy, co, k)| weight[[co, k / kw, dy, k % kw]])
}

pub(crate) fn conv_forward(input: &Array4<f64>, layer: &ConvLayer) -> Array4<f64> {
    let (n, _, h, w) = input.dim();
    let (cout, _, kh, kw) = layer.weight.dim();
    let wk = regroup(&layer.weight);
    let mut out = Array4::zeros((n, cout, h, w));
    for b in 0..n {
        let col = unfold(input.index_axis(Axis(0), b), kh, kw);
        let mut o = out
            .index_axis_mut(Axis(0), b)
            .into_shape_with_order((cout, h * w))
            .expect("contiguous output");
        for (co, mut row) in o.axis_iter_mut(Axis(0)).enumerate() {
            row.fill(layer.bias[co]);
        }
        for dy in 0..kh {
            let cs = col.slice(s![.., dy * w..dy * w + h * w]);
            general_mat_mul(1.0, &wk.index_axis(Axis(0), dy), &cs, 1.0, &mut o);
        }
    }
    out
}

/// Gradients of a convolution given the upstream gradient `dout`.
pub(crate) fn conv_backward(
    input: &Array4<f64>,
    layer: &ConvLayer,
    dout: &Array4<f64>,
    need_input_grad: bool,
) -> (ConvLayer, Option<Array4<f64>>) {
    let (n, cin, h, w) = input.dim();
    let (cout, _, kh, kw) = layer.weight.dim();
    let wk = regroup(&layer.weight);
    let mut dwk = Array3::<f64>::zeros((kh, cout, cin * kw));
    let mut dbias = Array1::<f64>::zeros(cout);
    let mut dinput = need_input_grad.then(|| Array4::<f64>::zeros((n, cin, h, w)));
    for b in 0..n {
        let col = unfold(input.index_axis(Axis(0), b), kh, kw);
        let d = dout
            .index_axis(Axis(0), b)
            .into_shape_with_order((cout, h * w))
            .expect("contiguous gradient");
        dbias += &d.sum_axis(Axis(1));
        let mut dcol = need_input_grad.then(|| Array2::<f64>::zeros(col.raw_dim()));
        for dy in 0..kh {
            let cs = col.slice(s![.., dy * w..dy * w + h * w]);
            general_mat_mul(1.0, &d, &cs.t(), 1.0, &mut dwk.index_axis_mut(Axis(0), dy));
            if let Some(dc) = dcol.as_mut() {
                let mut target = dc.slice_mut(s![.., dy * w..dy * w + h * w]);
                general_mat_mul(1.0, &wk.index_axis(Axis(0), dy).t(), &d, 1.0, &mut target);
            }
        }
        if let (Some(dc), Some(di)) = (dcol.as_ref(), dinput.as_mut()) {
            fold(dc, di.index_axis_mut(Axis(0), b), kh, kw);
        }
    }
    let dweight = Array4::from_shape_fn((cout, cin, kh, kw), |(co, ci, dy, dx)| dwk[[dy, co, ci * kw + dx]]);
    (
        ConvLayer {
            weight: dweight,
            bias: dbias,
        },
        dinput,
    )
}

/// Cached values of a training-mode batch normalization.
pub(crate) struct BnCache {
    pub xhat: Array4<f64>,
    pub inv_std: Array1<f64>,
    pub mean: Array1<f64>,
    /// Biased batch variance.
    pub var: Array1<f64>,
}

/// Normalize with batch statistics over `N x H x W` per channel.
pub(crate) fn bn_forward_train(x: &Array4<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array4<f64>, BnCache) {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ch in 0..c {
        let xs = x.index_axis(Axis(1), ch);
        let mu = xs.sum() / m;
        let v = xs.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / m;
        mean[ch] = mu;
        var[ch] = v;
    }
    let inv_std = var.mapv(|v: f64| 1.0 / (v + BN_EPS).sqrt());
    let mut xhat = x.clone();
    let mut y = Array4::zeros(x.raw_dim());
    for ch in 0..c {
        let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
        let mut xh = xhat.index_axis_mut(Axis(1), ch);
        xh.mapv_inplace(|v| (v - mu) * is);
        y.index_axis_mut(Axis(1), ch).zip_mut_with(&xh, |o, &v| *o = g * v + bt);
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

pub(crate) fn bn_forward_eval(
    x: &Array4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
) -> Array4<f64> {
    let mut y = x.clone();
    for ch in 0..x.dim().1 {
        let scale = gamma[ch] / (running_var[ch] + BN_EPS).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * scale + shift);
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward(
    dy: &Array4<f64>,
    cache: &BnCache,
    gamma: &Array1<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = dy.dim();
    let m = (n * h * w) as f64;
    let mut dx = Array4::zeros(dy.raw_dim());
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ch in 0..c {
        let d = dy.index_axis(Axis(1), ch);
        let xh = cache.xhat.index_axis(Axis(1), ch);
        let db = d.sum();
        let dg = d.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
        dgamma[ch] = dg;
        dbeta[ch] = db;
        let k = gamma[ch] * cache.inv_std[ch] / m;
        let mut out = dx.index_axis_mut(Axis(1), ch);
        ndarray::Zip::from(&mut out)
            .and(&d)
            .and(&xh)
            .for_each(|o, &g, &x| *o = k * (m * g - db - x * dg));
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Direct nested-loop same-padded convolution.
    fn conv_naive(input: &Array4<f64>, layer: &ConvLayer) -> Array4<f64> {
        let (n, cin, h, w) = input.dim();
        let (cout, _, kh, kw) = layer.weight.dim();
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut out = Array4::zeros((n, cout, h, w));
        for b in 0..n {
            for co in 0..cout {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = layer.bias[co];
                        for ci in 0..cin {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let yy = y as isize + dy as isize - ph as isize;
                                    let xx = x as isize + dx as isize - pw as isize;
                                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                        acc += layer.weight[[co, ci, dy, dx]] * input[[b, ci, yy as usize, xx as usize]];
                                    }
                                }
                            }
                        }
                        out[[b, co, y, x]] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_layer(rng: &mut impl Rng, cout: usize, cin: usize, kh: usize, kw: usize) -> ConvLayer {
        ConvLayer {
            weight: Array4::from_shape_simple_fn((cout, cin, kh, kw), || rng.gen_range(-1.0..1.0)),
            bias: Array1::from_shape_simple_fn(cout, || rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn unfolded_conv_matches_direct_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(cin, cout, kh, kw, h, w) in &[(1, 3, 4, 3, 8, 8), (2, 2, 5, 4, 7, 9), (3, 1, 1, 1, 5, 6), (2, 3, 8, 6, 6, 5)] {
            let input = Array4::from_shape_simple_fn((2, cin, h, w), || rng.gen_range(-1.0..1.0));
            let layer = random_layer(&mut rng, cout, cin, kh, kw);
            let fast = conv_forward(&input, &layer);
            let slow = conv_naive(&input, &layer);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <conv(x), g> is linear in x and in w; check against the direct loops.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let input = Array4::from_shape_simple_fn((2, 2, 6, 7), || rng.gen_range(-1.0..1.0));
        let layer = random_layer(&mut rng, 3, 2, 4, 3);
        let g = Array4::from_shape_simple_fn((2, 3, 6, 7), || rng.gen_range(-1.0..1.0));
        let (grads, dinput) = conv_backward(&input, &layer, &g, true);
        let dinput = dinput.unwrap();
        let inner = |x: &Array4<f64>, l: &ConvLayer| (conv_naive(x, l) * &g).sum();
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 5, 6], [0, 1, 3, 2]] {
            let mut xp = input.clone();
            xp[idx] += eps;
            let mut xm = input.clone();
            xm[idx] -= eps;
            let num = (inner(&xp, &layer) - inner(&xm, &layer)) / (2.0 * eps);
            assert!((num - dinput[idx]).abs() < 1e-7);
        }
        for idx in [[0, 0, 0, 0], [2, 1, 3, 2], [1, 0, 1, 1]] {
            let mut lp = layer.clone();
            lp.weight[idx] += eps;
            let mut lm = layer.clone();
            lm.weight[idx] -= eps;
            let num = (inner(&input, &lp) - inner(&input, &lm)) / (2.0 * eps);
            assert!((num - grads.weight[idx]).abs() < 1e-7);
        }
        assert!((grads.bias[1] - g.index_axis(Axis(1), 1).sum()).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_normalizes_each_channel() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = Array4::from_shape_simple_fn((3, 2, 4, 5), || rng.gen_range(-3.0..5.0));
        let (y, cache) = bn_forward_train(&x, &Array1::ones(2), &Array1::zeros(2));
        for ch in 0..2 {
            let ys = y.index_axis(Axis(1), ch);
            let m = ys.len() as f64;
            let mean = ys.sum() / m;
            let var = ys.fold(0.0, |a, v| a + (v - mean) * (v - mean)) / m;
            assert!(mean.abs() < 1e-12);
            assert!((var - cache.var[ch] / (cache.var[ch] + BN_EPS)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_with_identity_stats() {
        let x = Array4::from_elem((1, 1, 2, 2), 2.0);
        let y = bn_forward_eval(&x, &Array1::ones(1), &Array1::zeros(1), &Array1::zeros(1), &Array1::ones(1));
        assert!((y[[0, 0, 1, 1]] - 2.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-15);
    }
}
