//! Inference over a [`ModelSpec`]: full forward, cutouts, subset softmax and
//! per-branch attention gains.
//!
//! The trunk runs once per forward. Superclass tiers and class branches are
//! independent of one another given their input, so they are dispatched
//! through a [`Scheduler`]; each branch is computed identically whichever
//! scheduler runs it, which keeps serial, parallel and cutout results bitwise
//! equal.

pub mod net;

use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{apply_cutout, CutoutSet, HeadSpec, ModelSpec, Owner, Tier};
use crate::error::{HlfpError, Result};
use crate::tensor::ops::softmax_row;
use crate::tensor::{ParamStore, Tensor};
use net::{head_forward, join_columns, segment_forward, stem_forward, StageGain};

/// Class logits of a batch; column `p` belongs to `classes[p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub classes: Vec<usize>,
    /// `[N, classes.len()]`
    pub values: Tensor,
}

impl Logits {
    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn row(&self, n: usize) -> &[f32] {
        let k = self.classes.len();
        &self.values.data()[n * k..(n + 1) * k]
    }

    /// Column of `class`, if present.
    pub fn column(&self, class: usize) -> Option<Vec<f32>> {
        let p = self.classes.iter().position(|&c| c == class)?;
        Some((0..self.batch_size()).map(|n| self.row(n)[p]).collect())
    }

    /// The columns of `classes`, in that order.
    pub fn restrict(&self, classes: &CutoutSet) -> Result<Logits> {
        let pos: Vec<usize> = classes
            .classes()
            .iter()
            .map(|c| {
                self.classes
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| HlfpError::InvalidArgument(format!("class {c} has no logit")))
            })
            .collect::<Result<_>>()?;
        let n = self.batch_size();
        let data = (0..n)
            .flat_map(|r| pos.iter().map(move |&p| (r, p)))
            .map(|(r, p)| self.row(r)[p])
            .collect();
        Ok(Logits {
            classes: classes.classes().to_vec(),
            values: Tensor::new(vec![n, pos.len()], data)?,
        })
    }

    /// Predicted class per sample (first maximum wins).
    pub fn predict(&self) -> Vec<usize> {
        (0..self.batch_size())
            .map(|n| {
                let row = self.row(n);
                let mut best = 0;
                for (p, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = p;
                    }
                }
                self.classes[best]
            })
            .collect()
    }

    pub fn bitwise_eq(&self, other: &Logits) -> bool {
        self.classes == other.classes && self.values.bitwise_eq(&other.values)
    }
}

/// Where superclass tiers and branches run.
#[derive(Clone, Copy, Debug, Default)]
pub enum Scheduler<'a> {
    #[default]
    Serial,
    Pool(&'a rayon::ThreadPool),
}

impl Scheduler<'_> {
    /// `f(0), ..., f(n - 1)` in index order.
    pub fn map<T: Send>(&self, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        match self {
            Scheduler::Serial => (0..n).map(f).collect(),
            Scheduler::Pool(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }
}

/// Scale branch `class`'s feature maps by `gain` at the output of `stage`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDirective {
    pub class: usize,
    pub gain: f32,
    #[serde(default = "default_injection_stage")]
    pub stage: String,
}

fn default_injection_stage() -> String {
    "conv5".to_string()
}

impl AttentionDirective {
    pub fn new(class: usize, gain: f32) -> Self {
        AttentionDirective {
            class,
            gain,
            stage: default_injection_stage(),
        }
    }

    pub fn at_stage(mut self, stage: &str) -> Self {
        self.stage = stage.to_string();
        self
    }

    /// A zero gain is accepted: it silences the branch from `stage` on.
    fn check(&self, model: &ModelSpec) -> Result<()> {
        if !self.gain.is_finite() || self.gain < 0.0 {
            return Err(HlfpError::InvalidArgument(format!(
                "attention gain {} must be non-negative",
                self.gain
            )));
        }
        if model.active_classes.binary_search(&self.class).is_err() || !model.has_branches() {
            return Err(HlfpError::InvalidArgument(format!(
                "class {} has no branch in {}",
                self.class, model.name
            )));
        }
        match model.stage(&self.stage) {
            Some((Tier::Branch, _)) => Ok(()),
            Some((tier, _)) => Err(HlfpError::InvalidArgument(format!(
                "stage {} belongs to the {tier:?} tier, not to a class branch",
                self.stage
            ))),
            None => Err(HlfpError::InvalidArgument(format!(
                "{} has no stage {}",
                model.name, self.stage
            ))),
        }
    }
}

/// Options for a forward pass.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub scheduler: Scheduler<'a>,
    pub attention: Option<&'a AttentionDirective>,
    /// Receives the owner of every segment that is executed.
    pub trace: Option<&'a Mutex<Vec<Owner>>>,
}

fn check_input(model: &ModelSpec, x: &Tensor) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if [c, h, w] != model.input_shape {
        return Err(HlfpError::Shape(format!(
            "input {:?} does not match model input {:?}",
            x.shape(),
            model.input_shape
        )));
    }
    Ok(())
}

fn record(trace: Option<&Mutex<Vec<Owner>>>, owner: Owner) {
    if let Some(t) = trace {
        t.lock().expect("trace lock").push(owner);
    }
}

/// Inference forward of every active path of `model`.
pub fn forward(model: &ModelSpec, store: &ParamStore, x: &Tensor, opts: &ForwardOptions<'_>) -> Result<Logits> {
    check_input(model, x)?;
    if let Some(a) = opts.attention {
        a.check(model)?;
    }
    let (s, _) = stem_forward(store, model, x, None)?;
    let (trunk, _) = segment_forward(store, Owner::Trunk, &model.trunk_stages, &s, None, None)?;
    record(opts.trace, Owner::Trunk);
    if let HeadSpec::Shared { out_features, .. } = model.head {
        let (y, _) = head_forward(store, Owner::Trunk, &trunk, false)?;
        return Ok(Logits {
            classes: (1..=out_features).collect(),
            values: y,
        });
    }

    let supers = model.active_superclasses();
    let super_out: Vec<Tensor> = match &model.superclass {
        Some(tier) => opts
            .scheduler
            .map(supers.len(), |p| {
                record(opts.trace, Owner::Superclass(supers[p]));
                segment_forward(store, Owner::Superclass(supers[p]), &tier.stages, &trunk, None, None).map(|r| r.0)
            })
            .into_iter()
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let classes = &model.active_classes;
    let cols: Vec<Tensor> = opts
        .scheduler
        .map(classes.len(), |p| {
            let i = classes[p];
            record(opts.trace, Owner::Branch(i));
            let input = match &model.superclass {
                Some(tier) => {
                    let j = tier.superclass_of(i);
                    &super_out[supers.binary_search(&j).expect("active superclass")]
                }
                None => &trunk,
            };
            let gain = opts.attention.filter(|a| a.class == i).map(|a| StageGain {
                stage: &a.stage,
                gain: a.gain,
            });
            let (y, _) = segment_forward(store, Owner::Branch(i), &model.branch_stages, input, gain, None)?;
            head_forward(store, Owner::Branch(i), &y, false).map(|r| r.0)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(Logits {
        classes: classes.clone(),
        values: join_columns(&cols)?,
    })
}

/// Logits of every class of `model`.
pub fn forward_full(model: &ModelSpec, store: &ParamStore, x: &Tensor) -> Result<Logits> {
    forward(model, store, x, &ForwardOptions::default())
}

/// Logits of the classes in `classes` only; other branches are never run.
pub fn forward_cutout(model: &ModelSpec, store: &ParamStore, x: &Tensor, classes: &CutoutSet) -> Result<Logits> {
    let cut = apply_cutout(model, classes)?;
    forward_full(&cut, store, x)
}

/// Forward with one branch's feature maps multiplied by the directive's gain.
pub fn apply_attention(
    model: &ModelSpec,
    store: &ParamStore,
    x: &Tensor,
    directive: &AttentionDirective,
) -> Result<Logits> {
    directive.check(model)?;
    forward(
        model,
        store,
        x,
        &ForwardOptions {
            attention: Some(directive),
            ..Default::default()
        },
    )
}

/// Exponent sign used by [`subset_softmax`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxSign {
    /// `exp(+f)`: a larger branch output means a more likely class.
    #[default]
    Positive,
    /// `exp(-f)`, as the normalization formula is literally printed.
    Negative,
}

/// Class probabilities normalized over `classes` only. Row `n` holds the
/// probabilities of sample `n`, aligned with `classes`.
pub fn subset_softmax(logits: &Logits, classes: &CutoutSet, sign: SoftmaxSign) -> Result<Vec<Vec<f64>>> {
    let sub = logits.restrict(classes)?;
    if !sub.values.all_finite() {
        return Err(HlfpError::Numeric("non-finite logits".into()));
    }
    Ok((0..sub.batch_size())
        .map(|n| {
            let row: Vec<f32> = match sign {
                SoftmaxSign::Positive => sub.row(n).to_vec(),
                SoftmaxSign::Negative => sub.row(n).iter().map(|v| -v).collect(),
            };
            softmax_row(&row)
        })
        .collect())
}

/// Stable 64-bit FNV-1a, used to derive per-tensor seeds from names.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Fresh parameters for `model`. Every tensor draws from its own stream keyed
/// by `(seed, name)`, so a cutout initializes to exactly the same values as
/// the corresponding branches of the full model.
///
/// Convolutions and fully connected weights use He-normal fan-in scaling,
/// normalization starts at unit scale and zero shift, biases at zero.
pub fn init_params(model: &ModelSpec, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, shape, trainable) in model.tensor_slots()? {
        let suffix = name.rsplit('.').next().unwrap_or("");
        let t = match suffix {
            "weight" => {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
                let dist = Normal::new(0.0, std).map_err(|e| HlfpError::Numeric(e.to_string()))?;
                Tensor::from_fn(&shape, |_| dist.sample(&mut rng) as f32)
            }
            "gamma" | "running_var" => Tensor::full(&shape, 1.0),
            _ => Tensor::zeros(&shape),
        };
        if trainable {
            store.insert_param(name, t);
        } else {
            store.insert_buffer(name, t);
        }
    }
    Ok(store)
}

/// A desk-scale class-branch model: quarter widths of the small variant at 64x64.
pub fn tiny_hlfp(k: usize) -> Result<ModelSpec> {
    let m = crate::arch::build_hlfp(crate::arch::Variant::HlfpSmall, k)?;
    Ok(m.with_width_divisor(4)?.with_input_size(64, 64))
}

#[cfg(test)]
mod tests;
