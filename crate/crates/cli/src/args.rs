use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hlfp_core::{Augmentation, LrSchedule, SoftmaxSign, Variant};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(
    name = "hlfp",
    version,
    about = "Build, cost, train and run serial-parallel class-branch CNNs"
)]
pub struct Cli {
    /// Output format [default: table]
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,

    /// TOML file with [model], [data], [train], [bench] and [output] sections;
    /// flags on the command line take precedence
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Table,
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-stage layout and output shapes of an architecture
    Describe(DescribeArgs),
    /// Read, validate and canonicalize an architecture file
    Build(BuildArgs),
    /// Exact parameter and MAC counts, per layer
    Cost(CostArgs),
    /// Train on an image directory or a synthetic set
    Train(TrainArgs),
    /// Top-1 accuracy and class probabilities of a checkpoint
    Eval(EvalArgs),
    /// Keep a subset of class branches of a trained model
    Cutout(CutoutArgs),
    /// Evaluate with one branch's feature maps scaled by a gain
    Attend(AttendArgs),
    /// Inference latency: serial, branch-parallel or single branch
    Bench(BenchArgs),
}

/// Either an architecture file or a variant with its class count.
#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct ArchArgs {
    /// Architecture file written by `describe --emit`
    #[arg(long, value_name = "FILE", conflicts_with_all = ["variant", "classes", "superclass_map"])]
    pub arch: Option<PathBuf>,

    /// resnet18, resnet50, resnet152, hlfp-small, hlfp-big, hlfp-late-sp,
    /// hlfp-late-big-sp, hlfp-1b-late-sp or hlfp-nested
    #[arg(long)]
    pub variant: Option<Variant>,

    /// Number of classes k
    #[arg(long)]
    pub classes: Option<usize>,

    /// Superclass of each class for hlfp-nested, e.g. 1,1,2,3,3
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub superclass_map: Option<Vec<usize>>,

    /// Divide every internal channel width (desk-scale instances)
    #[arg(long, value_name = "D")]
    pub width_divisor: Option<usize>,

    /// Square input resolution in pixels
    #[arg(long, value_name = "PIXELS")]
    pub input_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub arch: ArchArgs,

    /// Print the architecture file instead of the stage table
    #[arg(long)]
    pub emit: bool,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    /// Architecture file, or `-` for standard input
    #[arg(long, value_name = "FILE")]
    pub from_file: PathBuf,

    /// Write the canonical file here instead of standard output
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    #[command(flatten)]
    pub arch: ArchArgs,

    /// Classes to keep, 1-based ranges and lists such as 1-5,8
    #[arg(long, value_name = "LIST")]
    pub cutout: Option<String>,

    /// Only per-owner totals instead of every layer
    #[arg(long)]
    pub summary: bool,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Directory of per-class image folders, or synthetic:k,n,size,seed
    #[arg(long, value_name = "SOURCE")]
    pub data: Option<String>,
}

#[derive(Args, Debug, Clone, Default, Serialize)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr", value_name = "RATE")]
    pub learning_rate: Option<f32>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub momentum: Option<f32>,
    #[arg(long)]
    pub weight_decay: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub augmentation: Option<AugmentationArg>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ScheduleArg {
    Constant,
    Cosine,
}

impl From<ScheduleArg> for LrSchedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Constant => LrSchedule::Constant,
            ScheduleArg::Cosine => LrSchedule::Cosine,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum AugmentationArg {
    None,
    FlipCrop,
}

impl From<AugmentationArg> for Augmentation {
    fn from(a: AugmentationArg) -> Self {
        match a {
            AugmentationArg::None => Augmentation::None,
            AugmentationArg::FlipCrop => Augmentation::FlipCrop,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainOverrides,

    /// Checkpoint path; the architecture and manifest are written next to it
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    #[default]
    Val,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
pub enum SignArg {
    /// exp(+f)
    #[default]
    Positive,
    /// exp(-f)
    Negative,
}

impl From<SignArg> for SoftmaxSign {
    fn from(s: SignArg) -> Self {
        match s {
            SignArg::Positive => SoftmaxSign::Positive,
            SignArg::Negative => SoftmaxSign::Negative,
        }
    }
}

/// Flags shared by the evaluating subcommands.
#[derive(Args, Debug)]
pub struct EvalCommon {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,

    /// Exponent sign of the class probabilities
    #[arg(long, value_enum, default_value = "positive")]
    pub sign: SignArg,

    /// Write per-sample class probabilities to this file (CSV, or JSON with --format json)
    #[arg(long, value_name = "FILE")]
    pub probs: Option<PathBuf>,

    /// Manifest path [default: hlfp-<subcommand>.manifest.json]
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: EvalCommon,

    /// Evaluate on these classes only (labels outside are excluded)
    #[arg(long, value_name = "LIST")]
    pub subset: Option<String>,

    /// Scale one branch, CLASS:GAIN
    #[arg(long, value_name = "CLASS:GAIN")]
    pub attend: Option<String>,

    /// Branch stage whose output the gain multiplies
    #[arg(long, default_value = "conv5")]
    pub stage: String,
}

#[derive(Args, Debug)]
pub struct CutoutArgs {
    #[command(flatten)]
    pub common: EvalCommon,

    /// Classes to keep, e.g. 1-5
    #[arg(long = "keep", value_name = "LIST")]
    pub keep: String,

    /// Write the reduced checkpoint here (its architecture goes next to it)
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttendArgs {
    #[command(flatten)]
    pub common: EvalCommon,

    /// Branch to amplify: a class index, or `true` for each sample's own label
    #[arg(long = "target", value_name = "CLASS|true")]
    pub target: String,

    /// Gains to evaluate; each row reports the change against the plain model
    #[arg(long, value_delimiter = ',', value_name = "LIST", required = true)]
    pub gain: Vec<f32>,

    #[arg(long, default_value = "conv5")]
    pub stage: String,

    /// Evaluate on these classes only
    #[arg(long, value_name = "LIST")]
    pub subset: Option<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchModeArg {
    Serial,
    Parallel,
    SingleBranch,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub arch: ArchArgs,

    /// Trained parameters; fresh seeded ones otherwise
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub mode: Option<BenchModeArg>,

    /// Threads for --mode parallel
    #[arg(long)]
    pub workers: Option<usize>,

    #[arg(long)]
    pub warmup: Option<usize>,

    #[arg(long)]
    pub iters: Option<usize>,

    /// Images per forward
    #[arg(long)]
    pub batch: Option<usize>,

    /// Branch kept by --mode single-branch
    #[arg(long = "branch", value_name = "CLASS")]
    pub branch: Option<usize>,

    /// Seed of the input (and of the parameters without --checkpoint)
    #[arg(long)]
    pub seed: Option<u64>,

    /// Manifest path [default: hlfp-bench.manifest.json]
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}
