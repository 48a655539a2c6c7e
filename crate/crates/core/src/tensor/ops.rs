//! Forward and backward kernels.
//!
//! Every reduction runs in a fixed order (batch, then channel, then spatial)
//! so results are bitwise reproducible for identical inputs. Per-sample work
//! never depends on the other samples of a batch, except in batch-statistics
//! normalization.

use super::Tensor;
use crate::error::{HlfpError, Result};

/// Normalization epsilon.
pub const BN_EPS: f32 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dArgs {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dArgs {
    fn default() -> Self {
        Conv2dArgs {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cg: usize,
    og: usize,
}

impl ConvGeometry {
    fn new(x: &Tensor, w: &Tensor, args: Conv2dArgs) -> Result<Self> {
        let (n, c, h, wd) = x.dims4()?;
        let (o, cg, kh, kw) = w.dims4()?;
        let g = args.groups;
        if g == 0 || args.stride == 0 {
            return Err(HlfpError::Shape("conv2d: groups and stride must be >= 1".into()));
        }
        if c % g != 0 || o % g != 0 || cg * g != c {
            return Err(HlfpError::Shape(format!(
                "conv2d: input {:?} and weight {:?} incompatible with {g} groups",
                x.shape(),
                w.shape()
            )));
        }
        let ph = h + 2 * args.padding;
        let pw = wd + 2 * args.padding;
        if ph < kh || pw < kw {
            return Err(HlfpError::Shape(format!(
                "conv2d: {kh}x{kw} kernel larger than padded {ph}x{pw} input"
            )));
        }
        Ok(ConvGeometry {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            ho: (ph - kh) / args.stride + 1,
            wo: (pw - kw) / args.stride + 1,
            cg,
            og: o / g,
        })
    }

    fn k(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self, args: Conv2dArgs) -> bool {
        self.kh == 1 && self.kw == 1 && args.stride == 1 && args.padding == 0
    }
}

/// Unfolds the channels `[c0, c0 + cg)` of one sample into a `K x P` matrix.
fn im2col(src: &[f32], geo: &ConvGeometry, args: Conv2dArgs, c0: usize, cols: &mut [f32]) {
    let p = geo.p();
    let pad = args.padding as isize;
    for ci in 0..geo.cg {
        let plane = &src[(c0 + ci) * geo.h * geo.w..(c0 + ci + 1) * geo.h * geo.w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = ((ci * geo.kh + ki) * geo.kw + kj) * p;
                for oy in 0..geo.ho {
                    let iy = (oy * args.stride + ki) as isize - pad;
                    let dst = &mut cols[row + oy * geo.wo..row + (oy + 1) * geo.wo];
                    if iy < 0 || iy >= geo.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let line = &plane[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * args.stride + kj) as isize - pad;
                        *d = if ix < 0 || ix >= geo.w as isize {
                            0.0
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatters a `K x P` column-gradient matrix back onto the input channels `[c0, c0 + cg)`.
fn col2im(cols: &[f32], geo: &ConvGeometry, args: Conv2dArgs, c0: usize, dst: &mut [f32]) {
    let p = geo.p();
    let pad = args.padding as isize;
    for ci in 0..geo.cg {
        let plane = &mut dst[(c0 + ci) * geo.h * geo.w..(c0 + ci + 1) * geo.h * geo.w];
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = ((ci * geo.kh + ki) * geo.kw + kj) * p;
                for oy in 0..geo.ho {
                    let iy = (oy * args.stride + ki) as isize - pad;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * geo.wo..row + (oy + 1) * geo.wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * args.stride + kj) as isize - pad;
                        if ix >= 0 && ix < geo.w as isize {
                            plane[iy as usize * geo.w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C/groups, kh, kw]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, args: Conv2dArgs) -> Result<Tensor> {
    let geo = ConvGeometry::new(x, w, args)?;
    if let Some(b) = bias {
        if b.len() != geo.o {
            return Err(HlfpError::Shape(format!(
                "conv2d: bias {:?} for {} outputs",
                b.shape(),
                geo.o
            )));
        }
    }
    let (k, p) = (geo.k(), geo.p());
    let groups = args.groups;
    let pointwise = geo.is_pointwise(args);
    let mut y = vec![0f32; geo.n * geo.o * p];
    let mut cols = if pointwise { Vec::new() } else { vec![0f32; k * p] };
    // f64 accumulators keep long dot products within a few ulps of exact
    let mut acc = vec![0f64; p];
    let xs = x.data();
    let ws = w.data();
    for n in 0..geo.n {
        let sample = &xs[n * geo.c * geo.h * geo.w..(n + 1) * geo.c * geo.h * geo.w];
        for g in 0..groups {
            let c0 = g * geo.cg;
            let cols: &[f32] = if pointwise {
                &sample[c0 * p..(c0 + geo.cg) * p]
            } else {
                im2col(sample, &geo, args, c0, &mut cols);
                &cols
            };
            for oi in 0..geo.og {
                let o = g * geo.og + oi;
                acc.fill(bias.map_or(0.0, |b| b.data()[o] as f64));
                let wrow = &ws[o * k..(o + 1) * k];
                for (ki, &wv) in wrow.iter().enumerate() {
                    let wv = wv as f64;
                    let crow = &cols[ki * p..(ki + 1) * p];
                    for (a, &cv) in acc.iter_mut().zip(crow) {
                        *a += wv * cv as f64;
                    }
                }
                let yrow = &mut y[(n * geo.o + o) * p..(n * geo.o + o + 1) * p];
                for (yv, &a) in yrow.iter_mut().zip(&acc) {
                    *yv = a as f32;
                }
            }
        }
    }
    Tensor::new(vec![geo.n, geo.o, geo.ho, geo.wo], y)
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Option<Tensor>,
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, args: Conv2dArgs, with_bias: bool) -> Result<ConvGrads> {
    let geo = ConvGeometry::new(x, w, args)?;
    if dy.shape() != [geo.n, geo.o, geo.ho, geo.wo] {
        return Err(HlfpError::Shape(format!(
            "conv2d backward: gradient {:?}, expected {:?}",
            dy.shape(),
            [geo.n, geo.o, geo.ho, geo.wo]
        )));
    }
    let (k, p) = (geo.k(), geo.p());
    let pointwise = geo.is_pointwise(args);
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();
    let mut dx = vec![0f32; x.len()];
    let mut dw = vec![0f32; w.len()];
    let mut cols = if pointwise { Vec::new() } else { vec![0f32; k * p] };
    let mut dcols = vec![0f32; k * p];
    let in_stride = geo.c * geo.h * geo.w;
    for n in 0..geo.n {
        let sample = &xs[n * in_stride..(n + 1) * in_stride];
        for g in 0..args.groups {
            let c0 = g * geo.cg;
            let cols: &[f32] = if pointwise {
                &sample[c0 * p..(c0 + geo.cg) * p]
            } else {
                im2col(sample, &geo, args, c0, &mut cols);
                &cols
            };
            dcols.fill(0.0);
            for oi in 0..geo.og {
                let o = g * geo.og + oi;
                let dyrow = &dys[(n * geo.o + o) * p..(n * geo.o + o + 1) * p];
                let dwrow = &mut dw[o * k..(o + 1) * k];
                let wrow = &ws[o * k..(o + 1) * k];
                for ki in 0..k {
                    let crow = &cols[ki * p..(ki + 1) * p];
                    let mut acc = 0f32;
                    for (&d, &c) in dyrow.iter().zip(crow) {
                        acc += d * c;
                    }
                    dwrow[ki] += acc;
                    let wv = wrow[ki];
                    let drow = &mut dcols[ki * p..(ki + 1) * p];
                    for (dc, &d) in drow.iter_mut().zip(dyrow) {
                        *dc += wv * d;
                    }
                }
            }
            let dsample = &mut dx[n * in_stride..(n + 1) * in_stride];
            if pointwise {
                for (d, &v) in dsample[c0 * p..(c0 + geo.cg) * p].iter_mut().zip(&dcols) {
                    *d += v;
                }
            } else {
                col2im(&dcols, &geo, args, c0, dsample);
            }
        }
    }
    let db = with_bias.then(|| {
        let mut db = vec![0f32; geo.o];
        for n in 0..geo.n {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dys[(n * geo.o + o) * p..(n * geo.o + o + 1) * p].iter().sum::<f32>();
            }
        }
        Tensor::new(vec![geo.o], db).expect("bias shape")
    });
    Ok(ConvGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        db,
    })
}

fn check_channel_vec(name: &str, t: &Tensor, c: usize) -> Result<()> {
    if t.len() != c {
        return Err(HlfpError::Shape(format!(
            "batchnorm: {name} has {} entries for {c} channels",
            t.len()
        )));
    }
    Ok(())
}

pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    gamma: Vec<f32>,
}

/// Output of training-mode normalization.
pub struct BatchNormTrain {
    pub y: Tensor,
    pub cache: BatchNormCache,
    pub batch_mean: Vec<f32>,
    /// Unbiased variance, used for the running estimate.
    pub batch_var: Vec<f32>,
}

/// Normalizes each channel over batch and spatial axes with batch statistics.
pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<BatchNormTrain> {
    let (n, c, h, w) = x.dims4()?;
    check_channel_vec("gamma", gamma, c)?;
    check_channel_vec("beta", beta, c)?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let xs = x.data();
    let mut mean = vec![0f32; c];
    let mut var_biased = vec![0f32; c];
    let mut var_unbiased = vec![0f32; c];
    for ch in 0..c {
        let mut s = 0f64;
        for i in 0..n {
            s += xs[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0f64;
        for i in 0..n {
            ss += xs[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                .iter()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
        mean[ch] = mu as f32;
        var_biased[ch] = (ss / m) as f32;
        var_unbiased[ch] = if m > 1.0 { (ss / (m - 1.0)) as f32 } else { 0.0 };
    }
    let inv_std: Vec<f32> = var_biased
        .iter()
        .map(|&v| (1.0 / ((v as f64) + BN_EPS as f64).sqrt()) as f32)
        .collect();
    let mut xhat = vec![0f32; x.len()];
    let mut y = vec![0f32; x.len()];
    let (g, b) = (gamma.data(), beta.data());
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                let xh = (xs[j] - mean[ch]) * inv_std[ch];
                xhat[j] = xh;
                y[j] = g[ch] * xh + b[ch];
            }
        }
    }
    Ok(BatchNormTrain {
        y: Tensor::new(x.shape().to_vec(), y)?,
        cache: BatchNormCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
            gamma: g.to_vec(),
        },
        batch_mean: mean,
        batch_var: var_unbiased,
    })
}

/// Normalizes with stored statistics.
pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        check_channel_vec(name, t, c)?;
    }
    let hw = h * w;
    let (g, b, rm, rv) = (gamma.data(), beta.data(), running_mean.data(), running_var.data());
    let scale: Vec<f32> = (0..c)
        .map(|ch| g[ch] * (1.0 / ((rv[ch] as f64) + BN_EPS as f64).sqrt()) as f32)
        .collect();
    let mut y = x.data().to_vec();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for v in &mut y[base..base + hw] {
                *v = (*v - rm[ch]) * scale[ch] + b[ch];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// `running <- (1 - momentum) * running + momentum * batch`
pub fn update_running(running: &mut Tensor, batch: &[f32]) {
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(cache: &BatchNormCache, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = dy.dims4()?;
    if dy.shape() != cache.xhat.shape() {
        return Err(HlfpError::Shape("batchnorm backward: gradient shape mismatch".into()));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let (dys, xh) = (dy.data(), cache.xhat.data());
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];
    let mut dx = vec![0f32; dy.len()];
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (0f64, 0f64);
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                sdy += dys[j] as f64;
                sdyx += dys[j] as f64 * xh[j] as f64;
            }
        }
        dbeta[ch] = sdy as f32;
        dgamma[ch] = sdyx as f32;
        let k = cache.gamma[ch] as f64 * cache.inv_std[ch] as f64 / m;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                dx[j] = (k * (m * dys[j] as f64 - sdy - xh[j] as f64 * sdyx)) as f32;
            }
        }
    }
    Ok((
        Tensor::new(dy.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Gradient through a ReLU given its output `y`.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(HlfpError::Shape("relu backward: shape mismatch".into()));
    }
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &d)| if o > 0.0 { d } else { 0.0 })
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// Max-pool with implicit `-inf` padding. Returns the output and, per output
/// element, the flat input index it was taken from.
pub fn maxpool_forward(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    let ho = crate::arch::pooled_extent(h, kernel, stride, padding)
        .ok_or_else(|| HlfpError::Shape(format!("maxpool: window {kernel} larger than {h}x{w} input")))?;
    let wo = crate::arch::pooled_extent(w, kernel, stride, padding)
        .ok_or_else(|| HlfpError::Shape(format!("maxpool: window {kernel} larger than {h}x{w} input")))?;
    if padding >= kernel {
        return Err(HlfpError::Shape(
            "maxpool: padding must be smaller than the window".into(),
        ));
    }
    let xs = x.data();
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = u32::MAX;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == u32::MAX || xs[idx] > best {
                            best = xs[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                y.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], y)?, arg))
}

pub fn maxpool_backward(argmax: &[u32], dy: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    if argmax.len() != dy.len() {
        return Err(HlfpError::Shape("maxpool backward: index/gradient mismatch".into()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i as usize] += g;
    }
    Ok(dx)
}

/// Average pool without padding.
pub fn avgpool_forward(x: &Tensor, kh: usize, kw: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if kh == 0 || kw == 0 || stride == 0 || kh > h || kw > w {
        return Err(HlfpError::Shape(format!(
            "avgpool: {kh}x{kw} window does not fit {h}x{w} input"
        )));
    }
    let (ho, wo) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let area = (kh * kw) as f32;
    let xs = x.data();
    let mut y = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0f32;
                for i in 0..kh {
                    let row = base + (oy * stride + i) * w + ox * stride;
                    s += xs[row..row + kw].iter().sum::<f32>();
                }
                y.push(s / area);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], y)
}

pub fn avgpool_backward(dy: &Tensor, input_shape: &[usize], kh: usize, kw: usize, stride: usize) -> Result<Tensor> {
    let (n, c, ho, wo) = dy.dims4()?;
    let (h, w) = (input_shape[2], input_shape[3]);
    let area = (kh * kw) as f32;
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    let g = dy.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let v = g[(plane * ho + oy) * wo + ox] / area;
                for i in 0..kh {
                    let row = base + (oy * stride + i) * w + ox * stride;
                    for e in &mut d[row..row + kw] {
                        *e += v;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// `y = x w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, fin) = x.dims2()?;
    let (fout, win) = w.dims2()?;
    if win != fin || b.len() != fout {
        return Err(HlfpError::Shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (xs, ws, bs) = (x.data(), w.data(), b.data());
    let mut y = Vec::with_capacity(n * fout);
    for i in 0..n {
        let xr = &xs[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let wr = &ws[o * fin..(o + 1) * fin];
            let mut acc = 0f32;
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            y.push(acc + bs[o]);
        }
    }
    Tensor::new(vec![n, fout], y)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, fin) = x.dims2()?;
    let (fout, _) = w.dims2()?;
    if dy.shape() != [n, fout] {
        return Err(HlfpError::Shape("linear backward: gradient shape mismatch".into()));
    }
    let (xs, ws, g) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0f32; n * fin];
    let mut dw = vec![0f32; fout * fin];
    let mut db = vec![0f32; fout];
    for i in 0..n {
        let xr = &xs[i * fin..(i + 1) * fin];
        let dxr = &mut dx[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let go = g[i * fout + o];
            db[o] += go;
            let wr = &ws[o * fin..(o + 1) * fin];
            let dwr = &mut dw[o * fin..(o + 1) * fin];
            for j in 0..fin {
                dwr[j] += go * xr[j];
                dxr[j] += go * wr[j];
            }
        }
    }
    Ok((
        Tensor::new(vec![n, fin], dx)?,
        Tensor::new(vec![fout, fin], dw)?,
        Tensor::new(vec![fout], db)?,
    ))
}

/// Residual sum; the backward pass hands `dy` to both inputs unchanged.
pub fn add_residual(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// `g * x`. A gain of exactly 1 returns the input bit for bit.
pub fn scalar_scale(x: &Tensor, gain: f32) -> Result<Tensor> {
    if !gain.is_finite() {
        return Err(HlfpError::Numeric(format!("gain {gain} is not finite")));
    }
    let mut y = x.clone();
    for v in y.data_mut() {
        *v *= gain;
    }
    Ok(y)
}

/// Returns `(dx, dgain)`.
pub fn scalar_scale_backward(x: &Tensor, gain: f32, dy: &Tensor) -> Result<(Tensor, f32)> {
    if x.shape() != dy.shape() {
        return Err(HlfpError::Shape("scale backward: shape mismatch".into()));
    }
    let dgain = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum::<f64>();
    Ok((scalar_scale(dy, gain)?, dgain as f32))
}

/// Softmax of one row with max subtraction, accumulated in `f64`.
pub fn softmax_row(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean cross-entropy of `logits: [N, k]` against 0-based `targets`, with the
/// gradient `(softmax - one_hot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f32, Tensor)> {
    let (n, k) = logits.dims2()?;
    if targets.len() != n {
        return Err(HlfpError::Shape(format!("{} targets for {n} rows", targets.len())));
    }
    if !logits.all_finite() {
        return Err(HlfpError::Numeric("non-finite logits".into()));
    }
    let mut loss = 0f64;
    let mut grad = vec![0f32; n * k];
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(HlfpError::InvalidArgument(format!("target {t} outside {k} classes")));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let p = softmax_row(row);
        loss -= p[t].max(f64::MIN_POSITIVE).ln();
        for j in 0..k {
            let onehot = if j == t { 1.0 } else { 0.0 };
            grad[i * k + j] = ((p[j] - onehot) / n as f64) as f32;
        }
    }
    Ok(((loss / n as f64) as f32, Tensor::new(vec![n, k], grad)?))
}
