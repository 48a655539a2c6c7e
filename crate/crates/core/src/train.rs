//! Mini-batch SGD with momentum and weight decay, and top-1 evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{CutoutSet, HeadSpec, ModelSpec};
use crate::data::Dataset;
use crate::error::{HlfpError, Result};
use crate::runtime::{forward, init_params, net, AttentionDirective, ForwardOptions, Logits};
use crate::tensor::{ops, Checkpoint, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    /// Random horizontal flip and a random crop from a zero-padded copy.
    FlipCrop,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half a cosine from the base rate down to zero over all epochs, stepped per epoch.
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub schedule: LrSchedule,
    pub momentum: f32,
    /// L2 penalty on convolution and fully connected weights.
    pub weight_decay: f32,
    pub seed: u64,
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            augmentation: Augmentation::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HlfpError::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and non-negative");
        }
        Ok(())
    }

    /// Rate used throughout `epoch` (1-based).
    pub fn rate_at(&self, epoch: usize) -> f32 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = (epoch - 1) as f64 / self.epochs.max(1) as f64;
                (self.learning_rate as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f32,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }
}

/// Columns of the model's logits, in order.
fn output_classes(model: &ModelSpec) -> Vec<usize> {
    match model.head {
        HeadSpec::Shared { out_features, .. } => (1..=out_features).collect(),
        _ => model.active_classes.clone(),
    }
}

/// Positions of `labels` among the model outputs.
fn targets(outputs: &[usize], labels: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            outputs
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| HlfpError::Dataset(format!("label {l} has no output in this model")))
        })
        .collect()
}

fn augment(x: &mut Tensor, rng: &mut ChaCha8Rng) -> Result<()> {
    const PAD: i64 = 4;
    let (n, c, h, w) = x.dims4()?;
    let src = x.data().to_vec();
    let out = x.data_mut();
    for b in 0..n {
        let flip = rng.random_bool(0.5);
        let dy = rng.random_range(-PAD..=PAD);
        let dx = rng.random_range(-PAD..=PAD);
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for y in 0..h {
                for xo in 0..w {
                    let sy = y as isize + dy as isize;
                    let sx0 = if flip { (w - 1 - xo) as isize } else { xo as isize };
                    let sx = sx0 + dx as isize;
                    out[base + y * w + xo] = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        0.0
                    } else {
                        src[base + sy as usize * w + sx as usize]
                    };
                }
            }
        }
    }
    Ok(())
}

fn is_decayed(name: &str) -> bool {
    name.ends_with(".weight")
}

/// One SGD step: `v = momentum * v + g + wd * w; w -= lr * v`.
fn sgd_step(store: &mut ParamStore, grads: &crate::tensor::Grads, cfg: &TrainConfig, lr: f32) -> Result<()> {
    for (name, p) in store.params_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| HlfpError::MissingParameter(format!("{name} (gradient)")))?;
        let wd = if is_decayed(name) { cfg.weight_decay } else { 0.0 };
        let v = p.velocity.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for ((w, v), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = cfg.momentum * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Trains freshly initialized parameters (seeded by `config.seed`).
pub fn train(
    model: &ModelSpec,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let store = init_params(model, config.seed)?;
    train_from(model, store, train_set, val_set, config)
}

/// Continues training from `store`. Shuffling and augmentation are driven by
/// `config.seed`, so equal inputs give bitwise-equal results.
pub fn train_from(
    model: &ModelSpec,
    mut store: ParamStore,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(HlfpError::Dataset("empty training set".into()));
    }
    if train_set.image_shape != model.input_shape {
        return Err(HlfpError::Shape(format!(
            "images {:?} do not match model input {:?}",
            train_set.image_shape, model.input_shape
        )));
    }
    let outputs = output_classes(model);
    let all_targets = targets(&outputs, train_set.labels())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let lr = config.rate_at(epoch);
        let (mut loss_sum, mut correct) = (0f64, 0usize);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let (mut x, _) = train_set.batch(idx)?;
            if config.augmentation == Augmentation::FlipCrop {
                augment(&mut x, &mut rng)?;
            }
            let t: Vec<usize> = idx.iter().map(|&i| all_targets[i]).collect();
            let diverged = |loss: f32| HlfpError::Diverged {
                epoch,
                batch: batch + 1,
                loss,
            };
            let (logits, tape) = net::forward_train(model, &store, &x)?;
            if !logits.all_finite() {
                return Err(diverged(f32::NAN));
            }
            let (loss, dlogits) = ops::softmax_cross_entropy(&logits, &t)?;
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            let (grads, _) = net::backward(&store, &tape, &dlogits)?;
            sgd_step(&mut store, &grads, config, lr)?;
            for s in &tape.stats {
                s.apply(&mut store)?;
            }
            loss_sum += loss as f64 * idx.len() as f64;
            let k = outputs.len();
            for (r, &target) in t.iter().enumerate() {
                if argmax(&logits.data()[r * k..(r + 1) * k]) == target {
                    correct += 1;
                }
            }
        }
        let n = train_set.len() as f64;
        let val_top1 = val_set.map(|v| evaluate(model, &store, v, None)).transpose()?;
        metrics.push(EpochMetrics {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / n,
            train_top1: correct as f64 / n,
            val_top1,
        });
    }
    Ok(TrainOutcome { store, metrics })
}

/// First index of the largest value.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub const EVAL_BATCH: usize = 64;

/// Inference logits of every sample of `dataset`, in batches.
pub fn infer_dataset(
    model: &ModelSpec,
    store: &ParamStore,
    dataset: &Dataset,
    opts: &ForwardOptions<'_>,
) -> Result<Logits> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = dataset.batch(chunk)?;
        parts.push(forward(model, store, &x, opts)?);
    }
    let classes = parts
        .first()
        .map(|p| p.classes.clone())
        .unwrap_or_else(|| output_classes(model));
    let k = classes.len();
    let values: Vec<f32> = parts.iter().flat_map(|p| p.values.data().iter().copied()).collect();
    Ok(Logits {
        classes,
        values: Tensor::new(vec![dataset.len(), k], values)?,
    })
}

/// Which branch an attended evaluation amplifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionTarget {
    Class(usize),
    /// The branch of each sample's own label.
    TrueClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub target: AttentionTarget,
    pub gain: f32,
    pub stage: String,
}

/// Outcome of an evaluation over the samples labelled inside `classes`.
#[derive(Clone, Debug)]
pub struct Scored {
    pub classes: CutoutSet,
    pub labels: Vec<usize>,
    /// Restricted to `classes`.
    pub logits: Logits,
    pub predicted: Vec<usize>,
    pub top1: f64,
}

fn forward_indices(
    model: &ModelSpec,
    store: &ParamStore,
    dataset: &Dataset,
    indices: &[usize],
    opts: &ForwardOptions<'_>,
) -> Result<Vec<Logits>> {
    indices
        .chunks(EVAL_BATCH)
        .map(|chunk| forward(model, store, &dataset.batch(chunk)?.0, opts))
        .collect()
}

/// Evaluates `dataset` restricted to `classes` (default: the model's outputs),
/// optionally with one branch amplified.
pub fn score(
    model: &ModelSpec,
    store: &ParamStore,
    dataset: &Dataset,
    classes: Option<&CutoutSet>,
    attention: Option<&Attention>,
) -> Result<Scored> {
    let set = match classes {
        Some(c) => c.clone(),
        None => {
            let outputs = output_classes(model);
            let k = model.num_classes.max(outputs.len());
            CutoutSet::new(outputs, k)?
        }
    };
    let subset = dataset.restrict(&set);
    if subset.is_empty() {
        return Err(HlfpError::Dataset(format!("no samples labelled in {set}")));
    }
    let all: Vec<usize> = (0..subset.len()).collect();
    // (sample indices, logits) per forward group
    let groups: Vec<(Vec<usize>, Vec<Logits>)> = match attention {
        None => vec![(
            all.clone(),
            forward_indices(model, store, &subset, &all, &ForwardOptions::default())?,
        )],
        Some(a) => {
            let mut groups = Vec::new();
            let targets: Vec<(usize, Vec<usize>)> = match a.target {
                AttentionTarget::Class(c) => vec![(c, all.clone())],
                AttentionTarget::TrueClass => set
                    .classes()
                    .iter()
                    .map(|&c| (c, all.iter().copied().filter(|&i| subset.labels()[i] == c).collect()))
                    .filter(|(_, v): &(usize, Vec<usize>)| !v.is_empty())
                    .collect(),
            };
            for (class, idx) in targets {
                let directive = AttentionDirective::new(class, a.gain).at_stage(&a.stage);
                let opts = ForwardOptions {
                    attention: Some(&directive),
                    ..Default::default()
                };
                let parts = forward_indices(model, store, &subset, &idx, &opts)?;
                groups.push((idx, parts));
            }
            groups
        }
    };
    let k = set.len();
    let mut values = vec![0f32; subset.len() * k];
    for (idx, parts) in &groups {
        let mut rows = idx.iter();
        for part in parts {
            let part = part.restrict(&set)?;
            for r in 0..part.batch_size() {
                let i = *rows.next().expect("one row per sample");
                values[i * k..(i + 1) * k].copy_from_slice(part.row(r));
            }
        }
    }
    let logits = Logits {
        classes: set.classes().to_vec(),
        values: Tensor::new(vec![subset.len(), k], values)?,
    };
    let predicted = logits.predict();
    let correct = predicted.iter().zip(subset.labels()).filter(|(p, l)| p == l).count();
    Ok(Scored {
        classes: set,
        labels: subset.labels().to_vec(),
        top1: correct as f64 / subset.len() as f64,
        logits,
        predicted,
    })
}

/// Top-1 accuracy. With `classes`, samples labelled outside the set are
/// dropped and the prediction is the best logit among `classes`; otherwise the
/// model's own output classes play that role.
pub fn evaluate(model: &ModelSpec, store: &ParamStore, dataset: &Dataset, classes: Option<&CutoutSet>) -> Result<f64> {
    Ok(score(model, store, dataset, classes, None)?.top1)
}
