#![allow(dead_code)]

pub mod gradcheck;

use hlfp_core::tensor::ops::Conv2dArgs;
use hlfp_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, so activations stay off their kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f32 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.01 apart, so every max-pool window has a clear winner.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(
        shape.to_vec(),
        order.into_iter().map(|v| v as f32 * 0.01 - 0.5).collect(),
    )
    .unwrap()
}

/// `sum(r * y)` accumulated in f64.
pub fn weighted(y: &Tensor, r: &Tensor) -> f64 {
    assert_eq!(y.shape(), r.shape());
    y.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Central differences of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            let hi = (orig as f64 + FD_STEP) as f32;
            let lo = (orig as f64 - FD_STEP) as f32;
            probe.data_mut()[i] = hi;
            let up = f(&probe);
            probe.data_mut()[i] = lo;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            // divide by the step actually taken after rounding to f32
            (up - down) / (hi as f64 - lo as f64)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let (mut diff, mut na, mut nn) = (0f64, 0f64, 0f64);
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a as f64 - n).powi(2);
        na += (a as f64).powi(2);
        nn += n * n;
    }
    let scale = na.max(nn).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Six nested loops straight from the definition of cross-correlation.
pub fn naive_conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, args: Conv2dArgs) -> Vec<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, cg, kh, kw) = w.dims4().unwrap();
    let og = o / args.groups;
    let ho = (h + 2 * args.padding - kh) / args.stride + 1;
    let wo = (wd + 2 * args.padding - kw) / args.stride + 1;
    let mut y = vec![0f64; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            let g = oc / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |t| t.data()[oc] as f64);
                    for ci in 0..cg {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * args.stride + i) as isize - args.padding as isize;
                                let ix = (ox * args.stride + j) as isize - args.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + g * cg + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cg + ci) * kh + i) * kw + j];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    y[((b * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    y
}

/// A random convolution problem: (input, weight, bias, args).
pub fn random_conv_case(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor, Conv2dArgs) {
    let groups = [1, 1, 2, 3][rng.random_range(0..4)];
    let cg = rng.random_range(1..=3);
    let og = rng.random_range(1..=3);
    let k = [1, 2, 3, 5][rng.random_range(0..4)];
    let stride = rng.random_range(1..=3);
    let padding = rng.random_range(0..=k / 2);
    let h = rng.random_range(k.max(2)..=8);
    let w = rng.random_range(k.max(2)..=8);
    let n = rng.random_range(1..=2);
    let x = uniform(rng, &[n, cg * groups, h, w]);
    let wt = uniform(rng, &[og * groups, cg, k, k]);
    let b = uniform(rng, &[og * groups]);
    (
        x,
        wt,
        b,
        Conv2dArgs {
            stride,
            padding,
            groups,
        },
    )
}

/// Worst relative deviation of `got` from `oracle`, measured against `max(|oracle|, 1)`.
pub fn max_rel_dev(got: &[f32], oracle: &[f64]) -> f64 {
    got.iter()
        .zip(oracle)
        .map(|(&g, &o)| (g as f64 - o).abs() / o.abs().max(1.0))
        .fold(0.0, f64::max)
}
