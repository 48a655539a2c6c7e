//! Layer-by-layer execution of a [`ModelSpec`] with optional caches for the
//! backward pass.

use crate::arch::{BlockConv, BlockSpec, ConvSpec, HeadSpec, ModelSpec, Owner, StageSpec};
use crate::error::{HlfpError, Result};
use crate::tensor::ops::{self, BatchNormCache, Conv2dArgs};
use crate::tensor::{Grads, ParamStore, Tensor};

/// Batch statistics produced by one normalization layer in training mode.
#[derive(Clone, Debug)]
pub struct BnStats {
    /// Tensor-name prefix of the layer, e.g. `trunk.stem.bn`.
    pub prefix: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnStats {
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        ops::update_running(store.buffer_mut(&format!("{}.running_mean", self.prefix))?, &self.mean);
        ops::update_running(store.buffer_mut(&format!("{}.running_var", self.prefix))?, &self.var);
        Ok(())
    }
}

fn args_of(c: &ConvSpec) -> Conv2dArgs {
    Conv2dArgs {
        stride: c.stride,
        padding: c.padding().0,
        groups: c.groups,
    }
}

struct ConvBnCache {
    conv: String,
    bn: String,
    args: Conv2dArgs,
    has_bias: bool,
    x: Tensor,
    cache: BatchNormCache,
}

/// Convolution followed by normalization.
fn conv_bn(
    store: &ParamStore,
    owner: Owner,
    conv_layer: &str,
    norm_layer: &str,
    spec: &ConvSpec,
    x: &Tensor,
    train: Option<&mut Vec<BnStats>>,
) -> Result<(Tensor, Option<ConvBnCache>)> {
    let conv = format!("{}.{conv_layer}", owner.prefix());
    let bn = format!("{}.{norm_layer}", owner.prefix());
    let args = args_of(spec);
    let bias = if spec.has_bias {
        Some(store.param(&format!("{conv}.bias"))?)
    } else {
        None
    };
    let y = ops::conv2d_forward(x, store.param(&format!("{conv}.weight"))?, bias, args)?;
    let gamma = store.param(&format!("{bn}.gamma"))?;
    let beta = store.param(&format!("{bn}.beta"))?;
    match train {
        None => {
            let z = ops::batchnorm_infer(
                &y,
                gamma,
                beta,
                store.buffer(&format!("{bn}.running_mean"))?,
                store.buffer(&format!("{bn}.running_var"))?,
            )?;
            Ok((z, None))
        }
        Some(stats) => {
            let out = ops::batchnorm_train(&y, gamma, beta)?;
            stats.push(BnStats {
                prefix: bn.clone(),
                mean: out.batch_mean,
                var: out.batch_var,
            });
            Ok((
                out.y,
                Some(ConvBnCache {
                    conv,
                    bn,
                    args,
                    has_bias: spec.has_bias,
                    x: x.clone(),
                    cache: out.cache,
                }),
            ))
        }
    }
}

fn accumulate(grads: &mut Grads, name: String, g: Tensor) -> Result<()> {
    match grads.get_mut(&name) {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads.insert(name, g);
            Ok(())
        }
    }
}

fn conv_bn_backward(store: &ParamStore, c: &ConvBnCache, dy: &Tensor, grads: &mut Grads) -> Result<Tensor> {
    let (dconv, dgamma, dbeta) = ops::batchnorm_backward(&c.cache, dy)?;
    accumulate(grads, format!("{}.gamma", c.bn), dgamma)?;
    accumulate(grads, format!("{}.beta", c.bn), dbeta)?;
    let w = store.param(&format!("{}.weight", c.conv))?;
    let g = ops::conv2d_backward(&c.x, w, &dconv, c.args, c.has_bias)?;
    accumulate(grads, format!("{}.weight", c.conv), g.dw)?;
    if let Some(db) = g.db {
        accumulate(grads, format!("{}.bias", c.conv), db)?;
    }
    Ok(g.dx)
}

struct BlockCache {
    /// Per main-path convolution; the activation output is kept for every one but the last.
    main: Vec<(ConvBnCache, Option<Tensor>)>,
    proj: Option<ConvBnCache>,
    out: Tensor,
}

fn block_forward(
    store: &ParamStore,
    owner: Owner,
    stage: &str,
    rep: usize,
    block: &BlockSpec,
    x: &Tensor,
    mut train: Option<&mut Vec<BnStats>>,
) -> Result<(Tensor, Option<BlockCache>)> {
    let convs = block.main_convs();
    let mut cur = x.clone();
    let mut main = Vec::new();
    let name = |part: &str| format!("{stage}.{rep}.{part}");
    for (
        i,
        BlockConv {
            conv_name,
            norm_name,
            conv,
        },
    ) in convs.iter().enumerate()
    {
        let (y, cache) = conv_bn(
            store,
            owner,
            &name(conv_name),
            &name(norm_name),
            conv,
            &cur,
            train.as_deref_mut(),
        )?;
        let last = i + 1 == convs.len();
        cur = if last { y } else { ops::relu_forward(&y) };
        if let Some(c) = cache {
            main.push((c, (!last).then(|| cur.clone())));
        }
    }
    let (shortcut, proj) = match block.projection() {
        Some(pc) => {
            let (y, cache) = conv_bn(
                store,
                owner,
                &name(pc.conv_name),
                &name(pc.norm_name),
                &pc.conv,
                x,
                train.as_deref_mut(),
            )?;
            (y, cache)
        }
        None => (x.clone(), None),
    };
    let out = ops::relu_forward(&ops::add_residual(&cur, &shortcut)?);
    let cache = train.map(|_| BlockCache {
        main,
        proj,
        out: out.clone(),
    });
    Ok((out, cache))
}

fn block_backward(store: &ParamStore, c: &BlockCache, dy: &Tensor, grads: &mut Grads) -> Result<Tensor> {
    let dsum = ops::relu_backward(&c.out, dy)?;
    let mut d = dsum.clone();
    for (cb, relu_out) in c.main.iter().rev() {
        if let Some(y) = relu_out {
            d = ops::relu_backward(y, &d)?;
        }
        d = conv_bn_backward(store, cb, &d, grads)?;
    }
    let dshort = match &c.proj {
        Some(p) => conv_bn_backward(store, p, &dsum, grads)?,
        None => dsum,
    };
    d.add_assign(&dshort)?;
    Ok(d)
}

/// Scaling of one stage's output feature maps.
#[derive(Clone, Copy, Debug)]
pub(crate) struct StageGain<'a> {
    pub stage: &'a str,
    pub gain: f32,
}

#[derive(Default)]
pub(crate) struct SegmentCache {
    blocks: Vec<BlockCache>,
    /// Gain applied after block `i` (its input is kept for the backward pass).
    gains: Vec<(usize, f32)>,
}

/// Runs `stages` for one owner.
pub(crate) fn segment_forward(
    store: &ParamStore,
    owner: Owner,
    stages: &[StageSpec],
    x: &Tensor,
    gain: Option<StageGain<'_>>,
    mut train: Option<&mut Vec<BnStats>>,
) -> Result<(Tensor, Option<SegmentCache>)> {
    let mut cur = x.clone();
    let mut cache = SegmentCache::default();
    for stage in stages {
        for (rep, block) in stage.blocks().enumerate() {
            let (y, bc) = block_forward(store, owner, &stage.name, rep, &block, &cur, train.as_deref_mut())?;
            cur = y;
            if let Some(bc) = bc {
                cache.blocks.push(bc);
            }
        }
        if let Some(g) = gain.filter(|g| g.stage == stage.name) {
            cur = ops::scalar_scale(&cur, g.gain)?;
            cache.gains.push((cache.blocks.len(), g.gain));
        }
    }
    Ok((cur, train.map(|_| cache)))
}

fn segment_backward(store: &ParamStore, c: &SegmentCache, dy: &Tensor, grads: &mut Grads) -> Result<Tensor> {
    let mut d = dy.clone();
    for i in (0..c.blocks.len()).rev() {
        for &(after, gain) in &c.gains {
            if after == i + 1 {
                d = ops::scalar_scale(&d, gain)?;
            }
        }
        d = block_backward(store, &c.blocks[i], &d, grads)?;
    }
    Ok(d)
}

pub(crate) struct StemCache {
    cb: ConvBnCache,
    relu_out: Tensor,
    pool_arg: Vec<u32>,
}

pub(crate) fn stem_forward(
    store: &ParamStore,
    model: &ModelSpec,
    x: &Tensor,
    train: Option<&mut Vec<BnStats>>,
) -> Result<(Tensor, Option<StemCache>)> {
    let (y, cb) = conv_bn(store, Owner::Trunk, "stem.conv", "stem.bn", &model.stem.conv, x, train)?;
    let r = ops::relu_forward(&y);
    let p = model.stem.pool;
    let (out, arg) = ops::maxpool_forward(&r, p.kernel, p.stride, p.padding)?;
    Ok((
        out,
        cb.map(|cb| StemCache {
            cb,
            relu_out: r,
            pool_arg: arg,
        }),
    ))
}

fn stem_backward(store: &ParamStore, c: &StemCache, dy: &Tensor, grads: &mut Grads) -> Result<Tensor> {
    let d = ops::maxpool_backward(&c.pool_arg, dy, c.relu_out.shape())?;
    let d = ops::relu_backward(&c.relu_out, &d)?;
    conv_bn_backward(store, &c.cb, &d, grads)
}

pub(crate) struct HeadCache {
    fc: String,
    in_shape: Vec<usize>,
    flat: Tensor,
}

/// Global average pool, flatten, fully connected.
pub(crate) fn head_forward(
    store: &ParamStore,
    owner: Owner,
    x: &Tensor,
    train: bool,
) -> Result<(Tensor, Option<HeadCache>)> {
    let (n, c, h, w) = x.dims4()?;
    let flat = ops::avgpool_forward(x, h, w, 1)?.reshape(&[n, c])?;
    let fc = format!("{}.head.fc", owner.prefix());
    let y = ops::linear_forward(
        &flat,
        store.param(&format!("{fc}.weight"))?,
        store.param(&format!("{fc}.bias"))?,
    )?;
    let cache = train.then(|| HeadCache {
        fc,
        in_shape: x.shape().to_vec(),
        flat,
    });
    Ok((y, cache))
}

fn head_backward(store: &ParamStore, c: &HeadCache, dy: &Tensor, grads: &mut Grads) -> Result<Tensor> {
    let w = store.param(&format!("{}.weight", c.fc))?;
    let (dflat, dw, db) = ops::linear_backward(&c.flat, w, dy)?;
    accumulate(grads, format!("{}.weight", c.fc), dw)?;
    accumulate(grads, format!("{}.bias", c.fc), db)?;
    let (n, ch, h, wd) = (c.in_shape[0], c.in_shape[1], c.in_shape[2], c.in_shape[3]);
    ops::avgpool_backward(&dflat.reshape(&[n, ch, 1, 1])?, &[n, ch, h, wd], h, wd, 1)
}

/// Everything the backward pass needs from one training-mode forward.
pub struct Tape {
    stem: StemCache,
    trunk: SegmentCache,
    shared_head: Option<HeadCache>,
    supers: Vec<(usize, SegmentCache)>,
    /// (class, position of its superclass in `supers`, stages, head)
    branches: Vec<(usize, Option<usize>, SegmentCache, HeadCache)>,
    /// Batch statistics to fold into the running estimates.
    pub stats: Vec<BnStats>,
}

/// Training-mode forward over every active path. Returns logits `[N, n]`
/// ordered like `model.active_classes` (or `1..=k` for a shared head).
pub fn forward_train(model: &ModelSpec, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tape)> {
    let mut stats = Vec::new();
    let (s, stem) = stem_forward(store, model, x, Some(&mut stats))?;
    let (t, trunk) = segment_forward(store, Owner::Trunk, &model.trunk_stages, &s, None, Some(&mut stats))?;
    let (stem, trunk) = (stem.expect("train cache"), trunk.expect("train cache"));
    if let HeadSpec::Shared { .. } = model.head {
        let (y, hc) = head_forward(store, Owner::Trunk, &t, true)?;
        return Ok((
            y,
            Tape {
                stem,
                trunk,
                shared_head: hc,
                supers: Vec::new(),
                branches: Vec::new(),
                stats,
            },
        ));
    }
    let mut supers = Vec::new();
    let mut super_out = Vec::new();
    if let Some(tier) = &model.superclass {
        for j in model.active_superclasses() {
            let (y, c) = segment_forward(store, Owner::Superclass(j), &tier.stages, &t, None, Some(&mut stats))?;
            supers.push((j, c.expect("train cache")));
            super_out.push(y);
        }
    }
    let mut branches = Vec::new();
    let mut cols = Vec::new();
    for &i in &model.active_classes {
        let sp = model.superclass.as_ref().map(|tier| {
            supers
                .iter()
                .position(|(j, _)| *j == tier.superclass_of(i))
                .expect("active superclass")
        });
        let input = sp.map_or(&t, |p| &super_out[p]);
        let (y, c) = segment_forward(
            store,
            Owner::Branch(i),
            &model.branch_stages,
            input,
            None,
            Some(&mut stats),
        )?;
        let (logit, hc) = head_forward(store, Owner::Branch(i), &y, true)?;
        cols.push(logit);
        branches.push((i, sp, c.expect("train cache"), hc.expect("train cache")));
    }
    let logits = join_columns(&cols)?;
    Ok((
        logits,
        Tape {
            stem,
            trunk,
            shared_head: None,
            supers,
            branches,
            stats,
        },
    ))
}

/// Concatenates `[N, 1]` columns into `[N, n]`.
pub(crate) fn join_columns(cols: &[Tensor]) -> Result<Tensor> {
    let first = cols
        .first()
        .ok_or_else(|| HlfpError::Shape("no branch outputs to join".into()))?;
    let n = first.shape()[0];
    let k = cols.len();
    let mut data = vec![0f32; n * k];
    for (p, c) in cols.iter().enumerate() {
        if c.shape() != [n, 1] {
            return Err(HlfpError::Shape(format!(
                "branch output {:?}, expected [{n}, 1]",
                c.shape()
            )));
        }
        for (row, &v) in c.data().iter().enumerate() {
            data[row * k + p] = v;
        }
    }
    Tensor::new(vec![n, k], data)
}

/// Gradients of every parameter touched by the forward pass, and of the input.
pub fn backward(store: &ParamStore, tape: &Tape, dlogits: &Tensor) -> Result<(Grads, Tensor)> {
    let mut grads = Grads::new();
    let dtrunk = if let Some(hc) = &tape.shared_head {
        head_backward(store, hc, dlogits, &mut grads)?
    } else {
        let (n, k) = dlogits.dims2()?;
        if k != tape.branches.len() {
            return Err(HlfpError::Shape(format!(
                "{k} logit columns for {} branches",
                tape.branches.len()
            )));
        }
        let mut dsupers: Vec<Option<Tensor>> = vec![None; tape.supers.len()];
        let mut dtrunk: Option<Tensor> = None;
        for (p, (_, sp, seg, head)) in tape.branches.iter().enumerate() {
            let col = Tensor::new(vec![n, 1], (0..n).map(|r| dlogits.data()[r * k + p]).collect())?;
            let d = head_backward(store, head, &col, &mut grads)?;
            let d = segment_backward(store, seg, &d, &mut grads)?;
            let slot = match sp {
                Some(p) => &mut dsupers[*p],
                None => &mut dtrunk,
            };
            match slot {
                Some(acc) => acc.add_assign(&d)?,
                None => *slot = Some(d),
            }
        }
        for ((_, seg), d) in tape.supers.iter().zip(dsupers) {
            let d = segment_backward(
                store,
                seg,
                &d.expect("every active superclass feeds a branch"),
                &mut grads,
            )?;
            match &mut dtrunk {
                Some(acc) => acc.add_assign(&d)?,
                None => dtrunk = Some(d),
            }
        }
        dtrunk.expect("at least one branch")
    };
    let d = segment_backward(store, &tape.trunk, &dtrunk, &mut grads)?;
    let dx = stem_backward(store, &tape.stem, &d, &mut grads)?;
    Ok((grads, dx))
}
