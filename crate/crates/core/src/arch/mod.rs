//! Declarative description of serial-parallel layer graphs.
//!
//! A [`ModelSpec`] is a shared serial trunk, an optional superclass tier
//! (one copy per superclass) and an optional set of class branches (one copy
//! per class). The builders in [`builders`] produce the residual baselines and
//! every class-branch variant; [`apply_cutout`] derives a model that keeps the
//! trunk and only a chosen subset of branches.

mod builders;
mod cutout;
pub mod file;
mod layers;
mod shapes;
mod validate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HlfpError, Result};

pub use builders::{build_hlfp, build_hlfp_nested, build_resnet, build_variant};
pub use cutout::{apply_cutout, CutoutSet};
pub use layers::{layer_templates, LayerKind, LayerTemplate, Owner, Tier};
pub use shapes::{infer_shapes, ShapeRow};
pub use validate::{validate, Violation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Resnet18,
    Resnet50,
    Resnet152,
    HlfpSmall,
    HlfpBig,
    HlfpLateSp,
    HlfpLateBigSp,
    Hlfp1bLateSp,
    HlfpNested,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Resnet18,
        Variant::Resnet50,
        Variant::Resnet152,
        Variant::HlfpSmall,
        Variant::HlfpBig,
        Variant::HlfpLateSp,
        Variant::HlfpLateBigSp,
        Variant::Hlfp1bLateSp,
        Variant::HlfpNested,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Resnet18 => "resnet18",
            Variant::Resnet50 => "resnet50",
            Variant::Resnet152 => "resnet152",
            Variant::HlfpSmall => "hlfp_small",
            Variant::HlfpBig => "hlfp_big",
            Variant::HlfpLateSp => "hlfp_late_sp",
            Variant::HlfpLateBigSp => "hlfp_late_big_sp",
            Variant::Hlfp1bLateSp => "hlfp_1b_late_sp",
            Variant::HlfpNested => "hlfp_nested",
        }
    }

    pub fn is_resnet(self) -> bool {
        matches!(self, Variant::Resnet18 | Variant::Resnet50 | Variant::Resnet152)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = HlfpError;

    /// Accepts both `hlfp_small` and `hlfp-small` spellings.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| HlfpError::Unsupported(format!("unknown variant `{s}`")))
    }
}

/// A 2-d convolution. Padding is always `kernel / 2` ("same" for odd kernels).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(kernel: usize, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels,
            out_channels,
            stride,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn padding(&self) -> (usize, usize) {
        (self.kernel_h / 2, self.kernel_w / 2)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn params(&self) -> u64 {
        let w = (self.kernel_h * self.kernel_w * (self.in_channels / self.groups)) as u64 * self.out_channels as u64;
        w + if self.has_bias { self.out_channels as u64 } else { 0 }
    }

    /// Multiply-accumulates for one image at the given output resolution.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.kernel_h * self.kernel_w * (self.in_channels / self.groups)) as u64
            * self.out_channels as u64
            * (out_h * out_w) as u64
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (ph, pw) = self.padding();
        pooled_extent(h, self.kernel_h, self.stride, ph).zip(pooled_extent(w, self.kernel_w, self.stride, pw))
    }
}

pub(crate) fn pooled_extent(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if n == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub conv: ConvSpec,
    pub pool: PoolSpec,
}

impl StemSpec {
    /// 7x7 stride-2 convolution followed by a 3x3 stride-2 max-pool.
    pub fn standard(out_channels: usize) -> Self {
        StemSpec {
            conv: ConvSpec::new(7, 3, out_channels, 2),
            pool: PoolSpec {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// 1x1 reduce, 3x3, 1x1 expand.
    Bottleneck,
    /// Two 3x3 convolutions (the 18-layer residual baseline only).
    Basic,
}

/// One residual block. Every convolution is bias-free and followed by an
/// affine normalization layer; the stride sits on the 3x3 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub has_projection: bool,
}

/// A convolution inside a block together with the name of its normalization layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConv {
    pub conv_name: &'static str,
    pub norm_name: &'static str,
    pub conv: ConvSpec,
}

impl BlockSpec {
    pub fn bottleneck(in_channels: usize, mid: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Bottleneck,
            in_channels,
            mid_channels: mid,
            out_channels,
            stride,
            has_projection: stride != 1 || in_channels != out_channels,
        }
    }

    pub fn basic(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec {
            kind: BlockKind::Basic,
            in_channels,
            mid_channels: out_channels,
            out_channels,
            stride,
            has_projection: stride != 1 || in_channels != out_channels,
        }
    }

    /// The block used for every repetition after the first.
    pub fn repeated(&self) -> Self {
        BlockSpec {
            in_channels: self.out_channels,
            stride: 1,
            has_projection: false,
            ..*self
        }
    }

    /// Main-path convolutions in execution order.
    pub fn main_convs(&self) -> Vec<BlockConv> {
        match self.kind {
            BlockKind::Bottleneck => vec![
                BlockConv {
                    conv_name: "conv1",
                    norm_name: "bn1",
                    conv: ConvSpec::new(1, self.in_channels, self.mid_channels, 1),
                },
                BlockConv {
                    conv_name: "conv2",
                    norm_name: "bn2",
                    conv: ConvSpec::new(3, self.mid_channels, self.mid_channels, self.stride),
                },
                BlockConv {
                    conv_name: "conv3",
                    norm_name: "bn3",
                    conv: ConvSpec::new(1, self.mid_channels, self.out_channels, 1),
                },
            ],
            BlockKind::Basic => vec![
                BlockConv {
                    conv_name: "conv1",
                    norm_name: "bn1",
                    conv: ConvSpec::new(3, self.in_channels, self.mid_channels, self.stride),
                },
                BlockConv {
                    conv_name: "conv2",
                    norm_name: "bn2",
                    conv: ConvSpec::new(3, self.mid_channels, self.out_channels, 1),
                },
            ],
        }
    }

    pub fn projection(&self) -> Option<BlockConv> {
        self.has_projection.then(|| BlockConv {
            conv_name: "downsample.conv",
            norm_name: "downsample.bn",
            conv: ConvSpec::new(1, self.in_channels, self.out_channels, self.stride),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub block: BlockSpec,
    pub reps: usize,
    pub parallelism: usize,
}

impl StageSpec {
    pub fn new(name: &str, block: BlockSpec, reps: usize, parallelism: usize) -> Self {
        StageSpec {
            name: name.to_string(),
            block,
            reps,
            parallelism,
        }
    }

    /// The concrete block for every repetition.
    pub fn blocks(&self) -> impl Iterator<Item = BlockSpec> + '_ {
        (0..self.reps).map(move |r| if r == 0 { self.block } else { self.block.repeated() })
    }
}

/// Classifier after the last stage: global average pool, flatten, fully connected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    /// One layer producing all class logits.
    Shared { in_features: usize, out_features: usize },
    /// Every branch ends in its own `in_features -> 1` layer.
    PerBranch { in_features: usize },
}

/// Intermediate parallel stages shared by every class mapped to the same superclass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperclassTier {
    /// `map[i - 1]` is the superclass (1-based) of class `i`.
    pub map: Vec<usize>,
    pub stages: Vec<StageSpec>,
}

impl SuperclassTier {
    pub fn num_superclasses(&self) -> usize {
        self.map.iter().copied().max().unwrap_or(0)
    }

    pub fn superclass_of(&self, class: usize) -> usize {
        self.map[class - 1]
    }

    /// Sorted distinct superclasses referenced by `classes`.
    pub fn superclasses_for(&self, classes: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = classes.iter().map(|&c| self.superclass_of(c)).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub variant: Variant,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Classes whose branches are present, strictly increasing. All of `1..=k`
    /// unless the model is a cutout.
    pub active_classes: Vec<usize>,
    pub stem: StemSpec,
    pub trunk_stages: Vec<StageSpec>,
    pub superclass: Option<SuperclassTier>,
    pub branch_stages: Vec<StageSpec>,
    pub head: HeadSpec,
}

impl ModelSpec {
    pub fn has_branches(&self) -> bool {
        !self.branch_stages.is_empty()
    }

    pub fn is_cutout(&self) -> bool {
        self.active_classes.len() != self.num_classes
    }

    /// Superclasses whose tier is executed for the active classes.
    pub fn active_superclasses(&self) -> Vec<usize> {
        self.superclass
            .as_ref()
            .map(|t| t.superclasses_for(&self.active_classes))
            .unwrap_or_default()
    }

    /// Number of logits a forward pass produces.
    pub fn num_outputs(&self) -> usize {
        match self.head {
            HeadSpec::Shared { out_features, .. } => out_features,
            HeadSpec::PerBranch { .. } => self.active_classes.len(),
        }
    }

    /// All stages in execution order for one class path.
    pub fn path_stages(&self) -> impl Iterator<Item = (Tier, &StageSpec)> {
        let sup = self.superclass.iter().flat_map(|t| t.stages.iter());
        self.trunk_stages
            .iter()
            .map(|s| (Tier::Trunk, s))
            .chain(sup.map(|s| (Tier::Superclass, s)))
            .chain(self.branch_stages.iter().map(|s| (Tier::Branch, s)))
    }

    pub fn stage(&self, name: &str) -> Option<(Tier, &StageSpec)> {
        self.path_stages().find(|(_, s)| s.name == name)
    }

    /// Channels leaving the last stage (or the stem when there are no stages).
    pub fn feature_channels(&self) -> usize {
        self.path_stages()
            .last()
            .map(|(_, s)| s.block.out_channels)
            .unwrap_or(self.stem.conv.out_channels)
    }

    /// Diagnostics that do not make the model invalid but should be shown
    /// alongside its cost report.
    pub fn report_flags(&self) -> Vec<String> {
        let mut flags = Vec::new();
        if self.variant == Variant::HlfpLateBigSp && self.num_classes >= 1000 {
            flags.push("cost exceeds report threshold".to_string());
        }
        flags
    }

    /// Divides every internal channel width by `divisor`; the image channels
    /// stay untouched. Used for desk-scale instances.
    pub fn with_width_divisor(&self, divisor: usize) -> Result<ModelSpec> {
        if divisor == 0 {
            return Err(HlfpError::InvalidArgument("width divisor must be >= 1".into()));
        }
        let div = |c: usize, what: &str| -> Result<usize> {
            if !c.is_multiple_of(divisor) || c < divisor {
                Err(HlfpError::InvalidArgument(format!(
                    "{what} width {c} is not divisible by {divisor}"
                )))
            } else {
                Ok(c / divisor)
            }
        };
        let scale_stage = |s: &StageSpec| -> Result<StageSpec> {
            let b = s.block;
            let mut out = s.clone();
            out.block.in_channels = div(b.in_channels, &s.name)?;
            out.block.mid_channels = div(b.mid_channels, &s.name)?;
            out.block.out_channels = div(b.out_channels, &s.name)?;
            Ok(out)
        };
        let mut m = self.clone();
        m.stem.conv.out_channels = div(self.stem.conv.out_channels, "stem")?;
        m.trunk_stages = self.trunk_stages.iter().map(&scale_stage).collect::<Result<_>>()?;
        m.branch_stages = self.branch_stages.iter().map(&scale_stage).collect::<Result<_>>()?;
        if let Some(t) = &mut m.superclass {
            t.stages = t.stages.iter().map(&scale_stage).collect::<Result<_>>()?;
        }
        m.head = match self.head {
            HeadSpec::Shared {
                in_features,
                out_features,
            } => HeadSpec::Shared {
                in_features: div(in_features, "head")?,
                out_features,
            },
            HeadSpec::PerBranch { in_features } => HeadSpec::PerBranch {
                in_features: div(in_features, "head")?,
            },
        };
        if divisor != 1 {
            m.name = format!("{}_w{divisor}", self.name);
        }
        Ok(m)
    }

    pub fn with_input_size(&self, height: usize, width: usize) -> ModelSpec {
        let mut m = self.clone();
        m.input_shape = [self.input_shape[0], height, width];
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parses_both_spellings() {
        assert_eq!("hlfp-small".parse::<Variant>().unwrap(), Variant::HlfpSmall);
        assert_eq!("HLFP_1B_LATE_SP".parse::<Variant>().unwrap(), Variant::Hlfp1bLateSp);
        assert!("vgg16".parse::<Variant>().is_err());
    }

    #[test]
    fn bottleneck_projection_rule() {
        assert!(!BlockSpec::bottleneck(256, 64, 256, 1).has_projection);
        assert!(BlockSpec::bottleneck(64, 64, 256, 1).has_projection);
        assert!(BlockSpec::bottleneck(512, 128, 512, 2).has_projection);
        let b = BlockSpec::bottleneck(256, 128, 512, 2).repeated();
        assert_eq!((b.in_channels, b.stride, b.has_projection), (512, 1, false));
    }

    #[test]
    fn conv_counts() {
        let c = ConvSpec::new(3, 128, 128, 1);
        assert_eq!(c.params(), 147_456);
        assert_eq!(c.macs(7, 7), 147_456 * 49);
        let unit = ConvSpec::new(1, 1, 1, 1);
        assert_eq!(unit.macs(1, 1), 1);
        assert_eq!(ConvSpec::new(7, 3, 64, 2).output_hw(224, 224), Some((112, 112)));
    }

    #[test]
    fn width_divisor_rejects_uneven() {
        let m = build_hlfp(Variant::HlfpSmall, 4).unwrap();
        assert!(m.with_width_divisor(3).is_err());
        let q = m.with_width_divisor(4).unwrap();
        assert_eq!(q.stem.conv.out_channels, 16);
        assert_eq!(q.head, HeadSpec::PerBranch { in_features: 32 });
        assert!(validate(&q).is_empty());
    }
}
