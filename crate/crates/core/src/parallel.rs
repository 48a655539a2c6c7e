//! Branch-parallel inference and latency measurement.

use std::time::Instant;

use rayon::{ThreadPool, ThreadPoolBuilder};
use serde::{Deserialize, Serialize};

use crate::arch::{apply_cutout, CutoutSet, ModelSpec};
use crate::error::{HlfpError, Result};
use crate::runtime::{forward, ForwardOptions, Logits, Scheduler};
use crate::tensor::{ParamStore, Tensor};

pub const MIN_WARMUP: usize = 5;
pub const MIN_ITERS: usize = 30;

/// A pool with exactly `workers` threads.
pub fn worker_pool(workers: usize) -> Result<ThreadPool> {
    if workers == 0 {
        return Err(HlfpError::InvalidArgument("workers must be at least 1".into()));
    }
    ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HlfpError::InvalidArgument(format!("cannot start {workers} workers: {e}")))
}

/// The trunk, then every branch one after another on the calling thread.
pub fn infer_serial(model: &ModelSpec, store: &ParamStore, x: &Tensor) -> Result<Logits> {
    forward(model, store, x, &ForwardOptions::default())
}

/// The trunk once, then branches spread over `workers` threads. Bitwise equal
/// to [`infer_serial`].
pub fn infer_parallel(model: &ModelSpec, store: &ParamStore, x: &Tensor, workers: usize) -> Result<Logits> {
    let pool = worker_pool(workers)?;
    infer_on(&pool, model, store, x)
}

/// [`infer_parallel`] on an existing pool.
pub fn infer_on(pool: &ThreadPool, model: &ModelSpec, store: &ParamStore, x: &Tensor) -> Result<Logits> {
    forward(
        model,
        store,
        x,
        &ForwardOptions {
            scheduler: Scheduler::Pool(pool),
            ..Default::default()
        },
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BenchMode {
    Serial,
    Parallel {
        workers: usize,
    },
    /// The trunk plus the branch of `class` only.
    SingleBranch {
        class: usize,
    },
}

impl BenchMode {
    pub fn label(&self) -> String {
        match self {
            BenchMode::Serial => "serial".into(),
            BenchMode::Parallel { workers } => format!("parallel/{workers}"),
            BenchMode::SingleBranch { class } => format!("single_branch/{class}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: MIN_WARMUP,
            iters: MIN_ITERS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub model: String,
    pub mode: String,
    pub workers: usize,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub measured_iters: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Median and nearest-rank 95th percentile of `samples`.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mean = s.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (mean, median, s[rank - 1])
}

/// Wall-clock latency of one forward of `x` under `mode`, after `warmup`
/// discarded runs.
pub fn bench(
    model: &ModelSpec,
    store: &ParamStore,
    x: &Tensor,
    mode: &BenchMode,
    cfg: BenchConfig,
) -> Result<BenchResult> {
    if cfg.warmup < MIN_WARMUP || cfg.iters < MIN_ITERS {
        return Err(HlfpError::InvalidArgument(format!(
            "need at least {MIN_WARMUP} warmup and {MIN_ITERS} measured iterations, got {} and {}",
            cfg.warmup, cfg.iters
        )));
    }
    let (target, pool, workers) = match mode {
        BenchMode::Serial => (model.clone(), None, 1),
        BenchMode::Parallel { workers } => (model.clone(), Some(worker_pool(*workers)?), *workers),
        BenchMode::SingleBranch { class } => {
            let set = if model.variant.is_resnet() {
                None
            } else {
                Some(CutoutSet::new(vec![*class], model.num_classes)?)
            };
            (
                set.map(|s| apply_cutout(model, &s))
                    .transpose()?
                    .unwrap_or_else(|| model.clone()),
                None,
                1,
            )
        }
    };
    let run = || match &pool {
        Some(p) => infer_on(p, &target, store, x),
        None => infer_serial(&target, store, x),
    };
    for _ in 0..cfg.warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let t = Instant::now();
        std::hint::black_box(run()?);
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let (mean, median, p95) = summarize(&samples);
    Ok(BenchResult {
        model: model.name.clone(),
        mode: mode.label(),
        workers,
        batch_size: x.shape()[0],
        warmup_iters: cfg.warmup,
        measured_iters: cfg.iters,
        mean_ms: mean,
        median_ms: median,
        p95_ms: p95,
        min_ms: samples.iter().copied().fold(f64::INFINITY, f64::min),
        max_ms: samples.iter().copied().fold(0.0, f64::max),
    })
}
