//! Serial-parallel class-branch networks.
//!
//! A shared serial trunk computes generic features once; after a split-point
//! every class owns a parallel branch that emits a single logit. This crate
//! builds and validates such architectures ([`arch`]), counts their exact
//! parameters and MACs ([`cost`]), trains desk-scale instances ([`train`]),
//! runs full, cutout and attention-modulated inference ([`runtime`]) and
//! evaluates branches concurrently ([`parallel`]).

pub mod arch;
pub mod cost;
pub mod data;
pub mod error;
pub mod parallel;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use arch::{
    apply_cutout, build_hlfp, build_hlfp_nested, build_resnet, build_variant, infer_shapes, validate, CutoutSet,
    ModelSpec, Owner, Tier, Variant, Violation,
};
pub use cost::{cost_report, count_macs, count_params, reduction_report, CostReport, Reduction};
pub use data::{gen_synthetic, load_image_dir, Dataset, Split, SyntheticSpec};
pub use error::{HlfpError, Result};
pub use parallel::{bench, infer_parallel, infer_serial, BenchConfig, BenchMode, BenchResult};
pub use runtime::{
    apply_attention, forward, forward_cutout, forward_full, init_params, subset_softmax, tiny_hlfp, AttentionDirective,
    ForwardOptions, Logits, Scheduler, SoftmaxSign,
};
pub use tensor::{Checkpoint, ParamStore, Tensor};
pub use train::{
    evaluate, infer_dataset, score, train, train_from, Attention, AttentionTarget, Augmentation, EpochMetrics,
    LrSchedule, Scored, TrainConfig, TrainOutcome,
};
