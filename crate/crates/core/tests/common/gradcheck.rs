//! Finite-difference checks of every backward kernel on seeded random shapes.

use hlfp_core::runtime::{init_params, net};
use hlfp_core::tensor::ops;
use hlfp_core::tensor::Tensor;
use hlfp_core::{build_hlfp_nested, Owner};
use rand::Rng;

use super::*;

/// (check name, relative error)
pub type Report = Vec<(String, f64)>;

fn push(out: &mut Report, name: &str, seed: u64, analytic: &[f32], numeric: &[f64]) {
    out.push((format!("{name}[seed {seed}]"), rel_err(analytic, numeric)));
}

pub fn conv(seed: u64, out: &mut Report) {
    let mut r = rng(seed);
    let (x, w, b, args) = random_conv_case(&mut r);
    let y = ops::conv2d_forward(&x, &w, Some(&b), args).unwrap();
    let dy = uniform(&mut r, y.shape());
    let g = ops::conv2d_backward(&x, &w, &dy, args, true).unwrap();
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| weighted(&ops::conv2d_forward(x, w, Some(b), args).unwrap(), &dy);
    push(out, "conv2d.dx", seed, g.dx.data(), &numeric_grad(&x, |t| f(t, &w, &b)));
    push(out, "conv2d.dw", seed, g.dw.data(), &numeric_grad(&w, |t| f(&x, t, &b)));
    push(
        out,
        "conv2d.db",
        seed,
        g.db.unwrap().data(),
        &numeric_grad(&b, |t| f(&x, &w, t)),
    );
}

pub fn batchnorm(seed: u64, out: &mut Report) {
    let mut r = rng(seed);
    // at least 8 values per channel; with fewer the normalized output barely depends on the input
    let shape = [
        r.random_range(2..=4),
        r.random_range(1..=3),
        r.random_range(2..=4),
        r.random_range(2..=4),
    ];
    let x = Tensor::from_fn(&shape, |_| r.random_range(-2.0..2.0));
    let gamma = Tensor::from_fn(&[shape[1]], |_| r.random_range(0.5..1.5));
    let beta = uniform(&mut r, &[shape[1]]);
    let dy = uniform(&mut r, &shape);
    let fwd = ops::batchnorm_train(&x, &gamma, &beta).unwrap();
    let (dx, dg, db) = ops::batchnorm_backward(&fwd.cache, &dy).unwrap();
    let f = |x: &Tensor, g: &Tensor, b: &Tensor| weighted(&ops::batchnorm_train(x, g, b).unwrap().y, &dy);
    push(
        out,
        "batchnorm.dx",
        seed,
        dx.data(),
        &numeric_grad(&x, |t| f(t, &gamma, &beta)),
    );
    push(
        out,
        "batchnorm.dgamma",
        seed,
        dg.data(),
        &numeric_grad(&gamma, |t| f(&x, t, &beta)),
    );
    push(
        out,
        "batchnorm.dbeta",
        seed,
        db.data(),
        &numeric_grad(&beta, |t| f(&x, &gamma, t)),
    );
}

pub fn relu(seed: u64, out: &mut Report) {
    let mut r = rng(seed);
    let x = away_from_zero(&mut r, &[2, 3, 3, 3]);
    let dy = uniform(&mut r, x.shape());
    let dx = ops::relu_backward(&ops::relu_forward(&x), &dy).unwrap();
    push(
        out,
        "relu.dx",
        seed,
        dx.data(),
        &numeric_grad(&x, |t| weighted(&ops::relu_forward(t), &dy)),
    );
}

pub fn maxpool(seed: u64, out: &mut Report) {
    let mut r = rng(seed);
    let h = r.random_range(3..=7);
    let x = distinct(&mut r, &[2, 2, h, h]);
    let (y, arg) = ops::maxpool_forward(&x, 3, 2, 1).unwrap();
    let dy = uniform(&mut r, y.shape());
    let dx = ops::maxpool_backward(&arg, &dy, x.shape()).unwrap();
    let f = |t: &Tensor| weighted(&ops::maxpool_forward(t, 3, 2, 1).unwrap().0, &dy);
    push(out, "maxpool.dx", seed, dx.data(), &numeric_grad(&x, f));
}

pub fn avgpool(seed: u64, out: &mut Report) {
    let mut r = rng(seed);
    let h = r.random_range(3..=6);
    let x = uniform(&mut r, &[2, 2, h, h]);
    let y = ops::avgpool_forward(&x, 3, 3, 1).unwrap();
    let dy = uniform(&mut r, y.shape());
    let dx = ops::avgpool_backward(&dy, x.shape(), 3, 3, 1).unwrap();
    let f = |t: &Tensor| weighted(&ops::avgpool_forward(t, 3, 3, 1).unwrap(), &dy);
    push(out, "avgpool.dx", seed, dx.data(), &numeric_grad(&x, f));
}

pub fn linear(seed: u64, out: &mut Report) {
    let mut r = rng(seed);
    let (n, fin, fout) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=5));
    let x = uniform(&mut r, &[n, fin]);
    let w = uniform(&mut r, &[fout, fin]);
    let b = uniform(&mut r, &[fout]);
    let dy = uniform(&mut r, &[n, fout]);
    let (dx, dw, db) = ops::linear_backward(&x, &w, &dy).unwrap();
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| weighted(&ops::linear_forward(x, w, b).unwrap(), &dy);
    push(out, "linear.dx", seed, dx.data(), &numeric_grad(&x, |t| f(t, &w, &b)));
    push(out, "linear.dw", seed, dw.data(), &numeric_grad(&w, |t| f(&x, t, &b)));
    push(out, "linear.db", seed, db.data(), &numeric_grad(&b, |t| f(&x, &w, t)));
}

pub fn residual_add(seed: u64, out: &mut Report) {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 2, 2, 2]);
    let b = uniform(&mut r, &[2, 2, 2, 2]);
    let dy = uniform(&mut r, a.shape());
    // both inputs receive the upstream gradient unchanged
    let na = numeric_grad(&a, |t| weighted(&ops::add_residual(t, &b).unwrap(), &dy));
    let nb = numeric_grad(&b, |t| weighted(&ops::add_residual(&a, t).unwrap(), &dy));
    push(out, "add_residual.da", seed, dy.data(), &na);
    push(out, "add_residual.db", seed, dy.data(), &nb);
}

pub fn scale(seed: u64, out: &mut Report) {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[2, 3, 2, 2]);
    let gain: f32 = r.random_range(0.2..2.0);
    let dy = uniform(&mut r, x.shape());
    let (dx, _) = ops::scalar_scale_backward(&x, gain, &dy).unwrap();
    push(
        out,
        "scalar_scale.dx",
        seed,
        dx.data(),
        &numeric_grad(&x, |t| weighted(&ops::scalar_scale(t, gain).unwrap(), &dy)),
    );
    // The gain derivative is one sum over all elements; same-sign data keeps
    // it from cancelling below the f32 resolution of the probe.
    let xp = Tensor::from_fn(x.shape(), |_| r.random_range(0.1..1.0));
    let dyp = Tensor::from_fn(x.shape(), |_| r.random_range(0.1..1.0));
    let (_, dgain) = ops::scalar_scale_backward(&xp, gain, &dyp).unwrap();
    let g = Tensor::full(&[1], gain);
    let ng = numeric_grad(&g, |t| weighted(&ops::scalar_scale(&xp, t.data()[0]).unwrap(), &dyp));
    push(out, "scalar_scale.dgain", seed, &[dgain], &ng);
}

pub fn cross_entropy(seed: u64, out: &mut Report) {
    let mut r = rng(seed);
    let (n, k) = (r.random_range(1..=4), r.random_range(2..=10));
    let logits = Tensor::from_fn(&[n, k], |_| r.random_range(-3.0..3.0));
    let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let (_, g) = ops::softmax_cross_entropy(&logits, &targets).unwrap();
    let f = |t: &Tensor| ops::softmax_cross_entropy(t, &targets).unwrap().0 as f64;
    push(out, "softmax_ce.dlogits", seed, g.data(), &numeric_grad(&logits, f));
}

/// Whole-network backward of a small nested model in training mode, probed on
/// the head, a branch normalization layer and a superclass projection.
///
/// The composed loss is only piecewise smooth (every ReLU and max-pool is a
/// kink, and batch statistics over few values amplify them), so this check
/// uses [`NETWORK_TOL`]; the per-kernel checks carry the strict bound.
pub fn network(seed: u64, out: &mut Report) {
    let mut r = rng(seed);
    let spec = build_hlfp_nested(&[1, 1, 2])
        .unwrap()
        .with_width_divisor(16)
        .unwrap()
        .with_input_size(64, 64);
    let store = init_params(&spec, seed).unwrap();
    let x = uniform(&mut r, &[4, 3, 64, 64]);
    let targets = [0usize, 2, 1, 1];
    let loss = |s: &hlfp_core::tensor::ParamStore, x: &Tensor| -> f64 {
        let (y, _) = net::forward_train(&spec, s, x).unwrap();
        ops::softmax_cross_entropy(&y, &targets).unwrap().0 as f64
    };
    let (y, tape) = net::forward_train(&spec, &store, &x).unwrap();
    let (_, dy) = ops::softmax_cross_entropy(&y, &targets).unwrap();
    let (grads, _) = net::backward(&store, &tape, &dy).unwrap();
    let probes = [
        Owner::Branch(3).tensor_name("head.fc", "weight"),
        Owner::Branch(1).tensor_name("conv6.0.bn3", "gamma"),
        Owner::Superclass(2).tensor_name("conv4.0.downsample.conv", "weight"),
    ];
    for name in probes {
        let p = store.param(&name).unwrap().clone();
        let numeric = numeric_grad(&p, |t| {
            let mut s = store.clone();
            s.set(&name, t.clone()).unwrap();
            loss(&s, &x)
        });
        push(out, &format!("network.{name}"), seed, grads[&name].data(), &numeric);
    }
}

pub const NETWORK_TOL: f64 = 1e-2;

/// Every check over `seeds`.
pub fn full_report(seeds: std::ops::Range<u64>) -> Report {
    let mut out = Vec::new();
    for seed in seeds {
        conv(seed, &mut out);
        batchnorm(seed, &mut out);
        relu(seed, &mut out);
        maxpool(seed, &mut out);
        avgpool(seed, &mut out);
        linear(seed, &mut out);
        residual_add(seed, &mut out);
        scale(seed, &mut out);
        cross_entropy(seed, &mut out);
    }
    out
}
