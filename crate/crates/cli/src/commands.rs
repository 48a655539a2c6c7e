use std::io::Read as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use hlfp_core::arch::{file, infer_shapes};
use hlfp_core::parallel::{infer_parallel, worker_pool, MIN_ITERS, MIN_WARMUP};
use hlfp_core::tensor::Checkpoint;
use hlfp_core::{
    apply_cutout, bench, cost_report, forward_cutout, infer_serial, init_params, load_image_dir, reduction_report,
    score, subset_softmax, train, validate, Attention, AttentionTarget, BenchConfig, BenchMode, CostReport, CutoutSet,
    Dataset, HlfpError, ModelSpec, ParamStore, Scored, Split, SyntheticSpec, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use crate::args::*;
use crate::config::{self, FileConfig, ModelSection};
use crate::manifest::{logits_sha256, sha256_hex, Manifest};
use crate::render::{fmt_f, Report, Table};
use crate::UsageError;

pub struct Ctx {
    pub file: FileConfig,
    pub format: Format,
}

impl Ctx {
    fn model(&self, flags: &ArchArgs) -> anyhow::Result<(ModelSpec, ModelSection)> {
        let section = config::resolve_model_section(flags, &self.file.model);
        Ok((config::build_model(&section)?, section))
    }

    fn data_source(&self, flags: &DataArgs) -> anyhow::Result<String> {
        flags
            .data
            .clone()
            .or_else(|| self.file.data.source.clone())
            .ok_or_else(|| UsageError("--data is required".into()).into())
    }
}

enum Source {
    Synthetic(SyntheticSpec),
    Dir(PathBuf),
}

fn parse_source(s: &str) -> anyhow::Result<Source> {
    if s.starts_with("synthetic:") {
        Ok(Source::Synthetic(s.parse()?))
    } else {
        Ok(Source::Dir(PathBuf::from(s)))
    }
}

/// Train and validation sets shaped for `model`.
fn load_data(source: &str, model: &ModelSpec) -> anyhow::Result<(Dataset, Dataset)> {
    let [_, h, w] = model.input_shape;
    let (train, val) = match parse_source(source)? {
        Source::Synthetic(spec) => {
            if (spec.image_size, spec.image_size) != (h, w) {
                return Err(HlfpError::Shape(format!(
                    "synthetic images are {0}x{0} but the model expects {h}x{w}; pass --input-size {0}",
                    spec.image_size
                ))
                .into());
            }
            (spec.generate(Split::Train)?, spec.generate(Split::Val)?)
        }
        Source::Dir(path) => load_image_dir(&path, (h, w))?,
    };
    if train.num_classes > model.num_classes {
        return Err(HlfpError::Dataset(format!(
            "the data has {} classes, the model {}",
            train.num_classes, model.num_classes
        ))
        .into());
    }
    Ok((train, val))
}

fn load_split(source: &str, model: &ModelSpec, split: SplitArg) -> anyhow::Result<Dataset> {
    let (train, val) = load_data(source, model)?;
    Ok(match split {
        SplitArg::Train => train,
        SplitArg::Val => val,
    })
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok((Checkpoint::from_bytes(&bytes)?, sha256_hex(&bytes)))
}

/// Parameters of `model` taken from `ckpt`; tensors of other branches are ignored.
fn store_for(model: &ModelSpec, ckpt: &Checkpoint) -> anyhow::Result<ParamStore> {
    let mut store = init_params(model, 0)?;
    ckpt.load_into(&mut store)
        .context("checkpoint does not match the architecture")?;
    Ok(store)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}.{suffix}", path.display()))
}

fn json_of<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

// describe / build / cost

pub fn describe(ctx: &Ctx, a: &DescribeArgs) -> anyhow::Result<String> {
    let (model, _) = ctx.model(&a.arch)?;
    if a.emit {
        return Ok(file::to_text(&model)?);
    }
    let rows = infer_shapes(&model)?;
    let mut t = Table::new(&["stage", "tier", "reps", "par", "channels", "output"]);
    for r in &rows {
        t.push(vec![
            r.stage.clone(),
            format!("{:?}", r.tier).to_lowercase(),
            r.reps.to_string(),
            r.parallelism.to_string(),
            r.channels.to_string(),
            format!("{}x{}", r.height, r.width),
        ]);
    }
    let [c, h, w] = model.input_shape;
    Report {
        title: Some(format!(
            "{} ({}, k = {}, input {c}x{h}x{w})",
            model.name, model.variant, model.num_classes
        )),
        tables: vec![t],
        json: json!({
            "model": model.name,
            "variant": model.variant.to_string(),
            "num_classes": model.num_classes,
            "input_shape": model.input_shape,
            "stages": json_of(&rows),
        }),
    }
    .render(ctx.format)
}

pub fn build(a: &BuildArgs) -> anyhow::Result<String> {
    let text = if a.from_file.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .context("reading standard input")?;
        s
    } else {
        std::fs::read_to_string(&a.from_file).with_context(|| format!("reading {}", a.from_file.display()))?
    };
    let model = file::from_text(&text)?;
    let violations = validate(&model);
    if !violations.is_empty() {
        return Err(HlfpError::Validation(violations.iter().map(|v| v.to_string()).collect()).into());
    }
    let canonical = file::to_text(&model)?;
    match &a.out {
        Some(path) => {
            file::write(path, &model)?;
            Ok(format!("{} is valid; wrote {}\n", model.name, path.display()))
        }
        None => Ok(canonical),
    }
}

fn owner_rows(report: &CostReport, t: &mut Table) {
    let mut push = |label: String, params: u64, macs: u64| {
        t.push(vec![
            label,
            String::new(),
            String::new(),
            params.to_string(),
            macs.to_string(),
        ])
    };
    push("trunk".into(), report.trunk_params, report.trunk_macs);
    if report.superclass_count > 0 {
        push(
            format!("superclass x{}", report.superclass_count),
            report.superclass_params(),
            report.per_superclass_macs * report.superclass_count as u64,
        );
    }
    if report.branch_count > 0 {
        push(
            format!("branch x{}", report.branch_count),
            report.branch_params(),
            report.per_branch_macs * report.branch_count as u64,
        );
    }
}

pub fn cost(ctx: &Ctx, a: &CostArgs) -> anyhow::Result<String> {
    let (full, _) = ctx.model(&a.arch)?;
    let full_report = cost_report(&full)?;
    let (model, report, reduction) = match &a.cutout {
        Some(list) => {
            let set = CutoutSet::parse(list, full.num_classes)?;
            let cut = apply_cutout(&full, &set)?;
            let r = cost_report(&cut)?;
            let red = reduction_report(&full_report, &r)?;
            (cut, r, Some(red))
        }
        None => (full.clone(), full_report.clone(), None),
    };
    let mut t = Table::new(&["layer", "stage", "owner", "params", "macs"]);
    if a.summary {
        owner_rows(&report, &mut t);
    } else {
        for l in &report.per_layer {
            t.push(vec![
                l.layer.clone(),
                l.stage.clone(),
                l.owner.to_string(),
                l.params.to_string(),
                l.macs.to_string(),
            ]);
        }
    }
    let footer = |label: &str, p: String, m: String| vec![label.to_string(), String::new(), String::new(), p, m];
    t.push(footer(
        "TOTAL",
        report.total_params.to_string(),
        report.total_macs.to_string(),
    ));
    if let Some(r) = &reduction {
        t.push(footer(
            "FULL_TOTAL",
            full_report.total_params.to_string(),
            full_report.total_macs.to_string(),
        ));
        t.push(footer(
            "REDUCTION_PCT",
            fmt_f(r.param_reduction_pct, 2),
            fmt_f(r.mac_reduction_pct, 2),
        ));
    }
    let flags = model.report_flags();
    let mut title = format!(
        "{}: {} parameters, {:.3} GMACs at {}x{}",
        model.name,
        report.total_params,
        report.gmacs(),
        model.input_shape[1],
        model.input_shape[2]
    );
    if let Some(r) = &reduction {
        title.push_str(&format!("\nagainst the full model: {r}"));
    }
    for f in &flags {
        title.push_str(&format!("\nnote: {f}"));
    }
    Report {
        title: Some(title),
        tables: vec![t],
        json: json!({
            "model": model.name,
            "input_shape": model.input_shape,
            "active_classes": model.active_classes,
            "totals": {"params": report.total_params, "macs": report.total_macs, "gmacs": report.gmacs()},
            "full_totals": reduction.map(|_| json!({"params": full_report.total_params, "macs": full_report.total_macs})),
            "reduction": json_of(&reduction),
            "layers": json_of(&report.per_layer),
            "trunk": {"params": report.trunk_params, "macs": report.trunk_macs},
            "per_superclass": {"params": report.per_superclass_params, "macs": report.per_superclass_macs, "count": report.superclass_count},
            "per_branch": {"params": report.per_branch_params, "macs": report.per_branch_macs, "count": report.branch_count},
            "flags": flags,
        }),
    }
    .render(ctx.format)
}

// train

pub fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<String> {
    let (model, section) = ctx.model(&a.arch)?;
    let source = ctx.data_source(&a.data)?;
    let cfg = config::train_config(&ctx.file.train, &a.train);
    cfg.validate()?;
    let (train_set, val_set) = load_data(&source, &model)?;
    let val = (!val_set.is_empty()).then_some(&val_set);
    let out = train(&model, &train_set, val, &cfg)?;
    let ckpt = out.checkpoint();
    let bytes = ckpt.to_bytes();
    std::fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    let arch_path = sidecar(&a.out, "arch.toml");
    file::write(&arch_path, &model)?;

    let mut t = Table::new(&["epoch", "learning_rate", "train_loss", "train_top1", "val_top1"]);
    for m in &out.metrics {
        t.push(vec![
            m.epoch.to_string(),
            format!("{}", m.learning_rate),
            fmt_f(m.train_loss, 6),
            fmt_f(m.train_top1, 4),
            m.val_top1.map(|v| fmt_f(v, 4)).unwrap_or_default(),
        ]);
    }
    let mut manifest = Manifest::new(
        "train",
        &model,
        json!({"model": section, "data": source, "train": cfg, "out": a.out}),
    )?;
    manifest.seed = Some(cfg.seed);
    manifest.data = Some(source);
    manifest.checkpoint_sha256 = Some(sha256_hex(&bytes));
    manifest.results = json!({"metrics": out.metrics, "train_samples": train_set.len(), "val_samples": val_set.len()});
    manifest.write(&sidecar(&a.out, "manifest.json"))?;
    Report {
        title: Some(format!(
            "trained {} on {} images; wrote {} and {}",
            model.name,
            train_set.len(),
            a.out.display(),
            arch_path.display()
        )),
        tables: vec![t],
        json: json!({"checkpoint": a.out, "arch": arch_path, "metrics": out.metrics}),
    }
    .render(ctx.format)
}

// eval / cutout / attend

struct Loaded {
    model: ModelSpec,
    section: ModelSection,
    source: String,
    data: Dataset,
    ckpt: Checkpoint,
    ckpt_sha: String,
}

fn load_for_eval(ctx: &Ctx, c: &EvalCommon) -> anyhow::Result<Loaded> {
    let (model, section) = ctx.model(&c.arch)?;
    let source = ctx.data_source(&c.data)?;
    let data = load_split(&source, &model, c.split)?;
    let (ckpt, ckpt_sha) = load_checkpoint(&c.checkpoint)?;
    Ok(Loaded {
        model,
        section,
        source,
        data,
        ckpt,
        ckpt_sha,
    })
}

/// Per-class rows: samples, top-1 and mean probability of the true class.
fn class_table(scored: &Scored, probs: &[Vec<f64>]) -> Table {
    let mut t = Table::new(&["class", "samples", "top1", "mean_prob"]);
    for (p, &c) in scored.classes.classes().iter().enumerate() {
        let idx: Vec<usize> = (0..scored.labels.len()).filter(|&i| scored.labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        let hit = idx.iter().filter(|&&i| scored.predicted[i] == c).count();
        let mean: f64 = idx.iter().map(|&i| probs[i][p]).sum::<f64>() / idx.len() as f64;
        t.push(vec![
            c.to_string(),
            idx.len().to_string(),
            fmt_f(hit as f64 / idx.len() as f64, 4),
            fmt_f(mean, 6),
        ]);
    }
    t.push(vec![
        "all".into(),
        scored.labels.len().to_string(),
        fmt_f(scored.top1, 4),
        String::new(),
    ]);
    t
}

fn write_probs(path: &Path, format: Format, scored: &Scored, probs: &[Vec<f64>]) -> anyhow::Result<()> {
    let text = if format == Format::Json {
        let rows: Vec<Value> = (0..scored.labels.len())
            .map(|i| json!({"sample": i, "label": scored.labels[i], "predicted": scored.predicted[i], "probs": probs[i]}))
            .collect();
        serde_json::to_string_pretty(&json!({"classes": scored.classes.classes(), "samples": rows}))? + "\n"
    } else {
        let mut headers = vec!["sample".to_string(), "label".into(), "predicted".into()];
        headers.extend(scored.classes.classes().iter().map(|c| format!("p_{c}")));
        let mut t = Table {
            headers,
            rows: Vec::new(),
        };
        for (i, p) in probs.iter().enumerate() {
            let mut row = vec![
                i.to_string(),
                scored.labels[i].to_string(),
                scored.predicted[i].to_string(),
            ];
            row.extend(p.iter().map(|p| format!("{p:.8}")));
            t.rows.push(row);
        }
        t.csv()?
    };
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_attend(s: &str) -> anyhow::Result<(usize, f32)> {
    let (c, g) = s
        .split_once(':')
        .ok_or_else(|| UsageError(format!("--attend expects CLASS:GAIN, got `{s}`")))?;
    let class = c
        .trim()
        .parse()
        .map_err(|_| UsageError(format!("`{c}` is not a class index")))?;
    let gain = g
        .trim()
        .parse()
        .map_err(|_| UsageError(format!("`{g}` is not a gain")))?;
    Ok((class, gain))
}

fn manifest_path(flag: &Option<PathBuf>, sub: &str) -> PathBuf {
    flag.clone()
        .unwrap_or_else(|| PathBuf::from(format!("hlfp-{sub}.manifest.json")))
}

pub fn eval(ctx: &Ctx, a: &EvalArgs) -> anyhow::Result<String> {
    let l = load_for_eval(ctx, &a.common)?;
    let store = store_for(&l.model, &l.ckpt)?;
    let subset = a
        .subset
        .as_deref()
        .map(|s| CutoutSet::parse(s, l.model.num_classes))
        .transpose()?;
    let attention = a
        .attend
        .as_deref()
        .map(parse_attend)
        .transpose()?
        .map(|(class, gain)| Attention {
            target: AttentionTarget::Class(class),
            gain,
            stage: a.stage.clone(),
        });
    let scored = score(&l.model, &store, &l.data, subset.as_ref(), attention.as_ref())?;
    let probs = subset_softmax(&scored.logits, &scored.classes, a.common.sign.into())?;
    if let Some(p) = &a.common.probs {
        write_probs(p, ctx.format, &scored, &probs)?;
    }
    let summary = json!({"top1": scored.top1, "samples": scored.labels.len(), "classes": scored.classes.to_string()});
    let mut manifest = Manifest::new(
        "eval",
        &l.model,
        json!({"model": l.section, "data": l.source, "split": a.common.split, "checkpoint": a.common.checkpoint,
               "subset": a.subset, "attend": attention, "sign": a.common.sign}),
    )?;
    manifest.data = Some(l.source.clone());
    manifest.checkpoint_sha256 = Some(l.ckpt_sha.clone());
    manifest.logits_sha256 = Some(logits_sha256(&scored.logits));
    manifest.results = summary.clone();
    manifest.write(&manifest_path(&a.common.manifest, "eval"))?;
    Report {
        title: Some(format!(
            "{}: top-1 {:.4} on {} {:?} images of classes {}",
            l.model.name,
            scored.top1,
            scored.labels.len(),
            a.common.split,
            scored.classes
        )),
        tables: vec![class_table(&scored, &probs)],
        json: json!({"summary": summary, "per_class": json_of(&class_table(&scored, &probs).rows)}),
    }
    .render(ctx.format)
}

pub fn cutout(ctx: &Ctx, a: &CutoutArgs) -> anyhow::Result<String> {
    let l = load_for_eval(ctx, &a.common)?;
    let set = CutoutSet::parse(&a.keep, l.model.num_classes)?;
    let cut = apply_cutout(&l.model, &set)?;
    // the trained weights are reused as they are
    let store = store_for(&cut, &l.ckpt)?;
    let full_cost = cost_report(&l.model)?;
    let cut_cost = cost_report(&cut)?;
    let red = reduction_report(&full_cost, &cut_cost)?;
    let scored = score(&cut, &store, &l.data, None, None)?;
    let full_store = store_for(&l.model, &l.ckpt)?;
    let restricted = score(&l.model, &full_store, &l.data, Some(&set), None)?;
    let probs = subset_softmax(&scored.logits, &scored.classes, a.common.sign.into())?;
    if let Some(p) = &a.common.probs {
        write_probs(p, ctx.format, &scored, &probs)?;
    }
    if let Some(out) = &a.out {
        let bytes = Checkpoint::from_store(&store).to_bytes();
        std::fs::write(out, bytes).with_context(|| format!("writing {}", out.display()))?;
        file::write(&sidecar(out, "arch.toml"), &cut)?;
    }
    let metrics = [
        ("classes", set.to_string()),
        ("params_full", full_cost.total_params.to_string()),
        ("params_cutout", cut_cost.total_params.to_string()),
        ("param_reduction_pct", fmt_f(red.param_reduction_pct, 2)),
        ("gmacs_full", fmt_f(full_cost.gmacs(), 4)),
        ("gmacs_cutout", fmt_f(cut_cost.gmacs(), 4)),
        ("mac_reduction_pct", fmt_f(red.mac_reduction_pct, 2)),
        ("samples", scored.labels.len().to_string()),
        ("top1_cutout", fmt_f(scored.top1, 4)),
        ("top1_full_restricted", fmt_f(restricted.top1, 4)),
        (
            "logits_identical",
            scored.logits.bitwise_eq(&restricted.logits).to_string(),
        ),
    ];
    let summary: serde_json::Map<String, Value> = metrics
        .iter()
        .map(|(k, v)| (k.to_string(), Value::String(v.clone())))
        .collect();
    let mut manifest = Manifest::new(
        "cutout",
        &cut,
        json!({"model": l.section, "keep": a.keep, "data": l.source, "split": a.common.split,
               "checkpoint": a.common.checkpoint, "out": a.out}),
    )?;
    manifest.data = Some(l.source.clone());
    manifest.checkpoint_sha256 = Some(l.ckpt_sha.clone());
    manifest.logits_sha256 = Some(logits_sha256(&scored.logits));
    manifest.results = Value::Object(summary.clone());
    manifest.write(&manifest_path(&a.common.manifest, "cutout"))?;
    Report {
        title: Some(format!("{} (no retraining)", cut.name)),
        tables: vec![Table::metrics(&metrics), class_table(&scored, &probs)],
        json: json!({"summary": summary, "per_class": json_of(&class_table(&scored, &probs).rows)}),
    }
    .render(ctx.format)
}

pub fn attend(ctx: &Ctx, a: &AttendArgs) -> anyhow::Result<String> {
    let l = load_for_eval(ctx, &a.common)?;
    let store = store_for(&l.model, &l.ckpt)?;
    let target = match a.target.as_str() {
        "true" => AttentionTarget::TrueClass,
        s => AttentionTarget::Class(
            s.parse()
                .map_err(|_| UsageError(format!("--target expects a class index or `true`, got `{s}`")))?,
        ),
    };
    let subset = a
        .subset
        .as_deref()
        .map(|s| CutoutSet::parse(s, l.model.num_classes))
        .transpose()?;
    let base = score(&l.model, &store, &l.data, subset.as_ref(), None)?;
    let mut t = Table::new(&["gain", "top1", "delta_top1", "samples"]);
    let mut rows = Vec::new();
    let mut last = None;
    for &gain in &a.gain {
        let att = Attention {
            target,
            gain,
            stage: a.stage.clone(),
        };
        let s = score(&l.model, &store, &l.data, subset.as_ref(), Some(&att))?;
        let delta = s.top1 - base.top1;
        t.push(vec![
            format!("{gain}"),
            fmt_f(s.top1, 4),
            format!("{delta:+.4}"),
            s.labels.len().to_string(),
        ]);
        rows.push(
            json!({"gain": gain, "top1": s.top1, "delta_top1": delta, "logits_sha256": logits_sha256(&s.logits)}),
        );
        last = Some(s);
    }
    if let (Some(p), Some(s)) = (&a.common.probs, &last) {
        let probs = subset_softmax(&s.logits, &s.classes, a.common.sign.into())?;
        write_probs(p, ctx.format, s, &probs)?;
    }
    let mut manifest = Manifest::new(
        "attend",
        &l.model,
        json!({"model": l.section, "data": l.source, "split": a.common.split, "checkpoint": a.common.checkpoint,
               "target": a.target, "gains": a.gain, "stage": a.stage, "subset": a.subset}),
    )?;
    manifest.data = Some(l.source.clone());
    manifest.checkpoint_sha256 = Some(l.ckpt_sha.clone());
    manifest.logits_sha256 = last.as_ref().map(|s| logits_sha256(&s.logits));
    manifest.results = json!({"baseline_top1": base.top1, "rows": rows});
    manifest.write(&manifest_path(&a.common.manifest, "attend"))?;
    Report {
        title: Some(format!(
            "{}: baseline top-1 {:.4}; gain applied at the {} output of {}",
            l.model.name,
            base.top1,
            a.stage,
            match target {
                AttentionTarget::TrueClass => "each sample's own branch".to_string(),
                AttentionTarget::Class(c) => format!("branch {c}"),
            }
        )),
        tables: vec![t],
        json: json!({"baseline_top1": base.top1, "rows": rows}),
    }
    .render(ctx.format)
}

// bench

fn seeded_input(model: &ModelSpec, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = model.input_shape;
    Tensor::from_fn(&[batch, c, h, w], |_| {
        let v: f32 = StandardNormal.sample(&mut rng);
        v
    })
}

pub fn bench_cmd(ctx: &Ctx, a: &BenchArgs) -> anyhow::Result<String> {
    let (model, section) = ctx.model(&a.arch)?;
    let f = &ctx.file.bench;
    let mode_arg = a.mode.or(f.mode).unwrap_or(BenchModeArg::Serial);
    let workers = a.workers.or(f.workers).unwrap_or(4);
    let cfg = BenchConfig {
        warmup: a.warmup.or(f.warmup).unwrap_or(MIN_WARMUP),
        iters: a.iters.or(f.iters).unwrap_or(MIN_ITERS),
    };
    let batch = a.batch.or(f.batch).unwrap_or(1);
    let seed = a.seed.or(f.seed).unwrap_or(0);
    let branch = a.branch.unwrap_or(1);
    if batch == 0 {
        return Err(HlfpError::InvalidArgument("--batch must be at least 1".into()).into());
    }
    let mode = match mode_arg {
        BenchModeArg::Serial => BenchMode::Serial,
        BenchModeArg::Parallel => {
            worker_pool(workers)?;
            BenchMode::Parallel { workers }
        }
        BenchModeArg::SingleBranch => BenchMode::SingleBranch { class: branch },
    };
    let (store, ckpt_sha) = match &a.checkpoint {
        Some(p) => {
            let (ckpt, sha) = load_checkpoint(p)?;
            (store_for(&model, &ckpt)?, Some(sha))
        }
        None => (init_params(&model, seed)?, None),
    };
    let x = seeded_input(&model, batch, seed);
    let logits = match &mode {
        BenchMode::Serial => infer_serial(&model, &store, &x)?,
        BenchMode::Parallel { workers } => infer_parallel(&model, &store, &x, *workers)?,
        BenchMode::SingleBranch { class } if !model.variant.is_resnet() => {
            forward_cutout(&model, &store, &x, &CutoutSet::new(vec![*class], model.num_classes)?)?
        }
        BenchMode::SingleBranch { .. } => infer_serial(&model, &store, &x)?,
    };
    let result = bench(&model, &store, &x, &mode, cfg)?;
    let mut t = Table::new(&[
        "model",
        "mode",
        "workers",
        "batch",
        "warmup",
        "iters",
        "mean_ms",
        "median_ms",
        "p95_ms",
    ]);
    t.push(vec![
        result.model.clone(),
        result.mode.clone(),
        result.workers.to_string(),
        result.batch_size.to_string(),
        result.warmup_iters.to_string(),
        result.measured_iters.to_string(),
        fmt_f(result.mean_ms, 3),
        fmt_f(result.median_ms, 3),
        fmt_f(result.p95_ms, 3),
    ]);
    let mut manifest = Manifest::new(
        "bench",
        &model,
        json!({"model": section, "mode": mode, "warmup": cfg.warmup, "iters": cfg.iters, "batch": batch,
               "checkpoint": a.checkpoint}),
    )?;
    manifest.seed = Some(seed);
    manifest.checkpoint_sha256 = ckpt_sha;
    manifest.logits_sha256 = Some(logits_sha256(&logits));
    manifest.results = json_of(&result);
    manifest.write(&manifest_path(&a.manifest, "bench"))?;
    let trunk_only = matches!(mode, BenchMode::SingleBranch { .. }) && model.variant.is_resnet();
    Report {
        title: trunk_only.then(|| {
            format!(
                "{} has no branches; single-branch mode times the whole network",
                model.name
            )
        }),
        tables: vec![t],
        json: json_of(&result),
    }
    .render(ctx.format)
}
