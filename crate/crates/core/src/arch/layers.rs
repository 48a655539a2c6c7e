use std::fmt;

use serde::{Deserialize, Serialize};

use super::{pooled_extent, ConvSpec, HeadSpec, ModelSpec};
use crate::error::{HlfpError, Result};

/// Which part of the path a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Trunk,
    Superclass,
    Branch,
}

/// Owner of a parameter tensor. Superclass and branch indices are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    Trunk,
    Superclass(usize),
    Branch(usize),
}

impl Owner {
    /// Prefix used in parameter tensor names.
    pub fn prefix(&self) -> String {
        match self {
            Owner::Trunk => "trunk".to_string(),
            Owner::Superclass(j) => format!("superclass{j}"),
            Owner::Branch(i) => format!("branch{i}"),
        }
    }

    pub fn tensor_name(&self, layer: &str, suffix: &str) -> String {
        format!("{}.{layer}.{suffix}", self.prefix())
    }

    pub fn tier(&self) -> Tier {
        match self {
            Owner::Trunk => Tier::Trunk,
            Owner::Superclass(_) => Tier::Superclass,
            Owner::Branch(_) => Tier::Branch,
        }
    }
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Trunk => f.write_str("trunk"),
            Owner::Superclass(j) => write!(f, "superclass-{j}"),
            Owner::Branch(i) => write!(f, "branch-{i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv(ConvSpec),
    /// Affine normalization: learnable scale and shift, running statistics as buffers.
    Norm {
        channels: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

/// One parametrized layer of a single path. Trunk layers exist once, superclass
/// and branch layers once per active superclass/class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerTemplate {
    pub tier: Tier,
    pub stage: String,
    pub name: String,
    pub kind: LayerKind,
    pub out_hw: (usize, usize),
}

/// A tensor belonging to a layer: name suffix, shape, trainable.
pub type TensorSlot = (&'static str, Vec<usize>, bool);

impl LayerTemplate {
    pub fn params(&self) -> u64 {
        match self.kind {
            LayerKind::Conv(c) => c.params(),
            LayerKind::Norm { channels } => 2 * channels as u64,
            LayerKind::Linear {
                in_features,
                out_features,
            } => (in_features * out_features + out_features) as u64,
        }
    }

    /// Normalization is not charged any MACs.
    pub fn macs(&self) -> u64 {
        match self.kind {
            LayerKind::Conv(c) => c.macs(self.out_hw.0, self.out_hw.1),
            LayerKind::Norm { .. } => 0,
            LayerKind::Linear {
                in_features,
                out_features,
            } => (in_features * out_features) as u64,
        }
    }

    pub fn tensors(&self) -> Vec<TensorSlot> {
        match self.kind {
            LayerKind::Conv(c) => {
                let mut v = vec![("weight", c.weight_shape().to_vec(), true)];
                if c.has_bias {
                    v.push(("bias", vec![c.out_channels], true));
                }
                v
            }
            LayerKind::Norm { channels } => vec![
                ("gamma", vec![channels], true),
                ("beta", vec![channels], true),
                ("running_mean", vec![channels], false),
                ("running_var", vec![channels], false),
            ],
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features], true),
                ("bias", vec![out_features], true),
            ],
        }
    }
}

pub(crate) fn block_layer_name(stage: &str, rep: usize, part: &str) -> String {
    format!("{stage}.{rep}.{part}")
}

/// Every parametrized layer of one trunk-to-logit path, with output resolutions
/// for the model's input shape.
pub fn layer_templates(model: &ModelSpec) -> Result<Vec<LayerTemplate>> {
    let [c, h, w] = model.input_shape;
    if c != model.stem.conv.in_channels {
        return Err(HlfpError::Shape(format!(
            "input has {c} channels, stem expects {}",
            model.stem.conv.in_channels
        )));
    }
    let shape_err =
        |what: &str, h: usize, w: usize| HlfpError::Shape(format!("{what}: non-positive output for {h}x{w} input"));

    let mut out = Vec::new();
    let stem = model.stem;
    let (sh, sw) = stem.conv.output_hw(h, w).ok_or_else(|| shape_err("stem.conv", h, w))?;
    out.push(LayerTemplate {
        tier: Tier::Trunk,
        stage: "stem".into(),
        name: "stem.conv".into(),
        kind: LayerKind::Conv(stem.conv),
        out_hw: (sh, sw),
    });
    out.push(LayerTemplate {
        tier: Tier::Trunk,
        stage: "stem".into(),
        name: "stem.bn".into(),
        kind: LayerKind::Norm {
            channels: stem.conv.out_channels,
        },
        out_hw: (sh, sw),
    });
    let p = stem.pool;
    let mut hw = pooled_extent(sh, p.kernel, p.stride, p.padding)
        .zip(pooled_extent(sw, p.kernel, p.stride, p.padding))
        .ok_or_else(|| shape_err("stem.pool", sh, sw))?;

    for (tier, stage) in model.path_stages() {
        for (rep, block) in stage.blocks().enumerate() {
            let mut cur = hw;
            for bc in block.main_convs() {
                cur = bc
                    .conv
                    .output_hw(cur.0, cur.1)
                    .ok_or_else(|| shape_err(&stage.name, cur.0, cur.1))?;
                out.push(LayerTemplate {
                    tier,
                    stage: stage.name.clone(),
                    name: block_layer_name(&stage.name, rep, bc.conv_name),
                    kind: LayerKind::Conv(bc.conv),
                    out_hw: cur,
                });
                out.push(LayerTemplate {
                    tier,
                    stage: stage.name.clone(),
                    name: block_layer_name(&stage.name, rep, bc.norm_name),
                    kind: LayerKind::Norm {
                        channels: bc.conv.out_channels,
                    },
                    out_hw: cur,
                });
            }
            if let Some(pc) = block.projection() {
                let phw = pc
                    .conv
                    .output_hw(hw.0, hw.1)
                    .ok_or_else(|| shape_err(&stage.name, hw.0, hw.1))?;
                if phw != cur {
                    return Err(HlfpError::Shape(format!(
                        "{}: shortcut resolution {phw:?} differs from main path {cur:?}",
                        stage.name
                    )));
                }
                out.push(LayerTemplate {
                    tier,
                    stage: stage.name.clone(),
                    name: block_layer_name(&stage.name, rep, pc.conv_name),
                    kind: LayerKind::Conv(pc.conv),
                    out_hw: cur,
                });
                out.push(LayerTemplate {
                    tier,
                    stage: stage.name.clone(),
                    name: block_layer_name(&stage.name, rep, pc.norm_name),
                    kind: LayerKind::Norm {
                        channels: pc.conv.out_channels,
                    },
                    out_hw: cur,
                });
            }
            hw = cur;
        }
    }

    let (tier, in_features, out_features) = match model.head {
        HeadSpec::Shared {
            in_features,
            out_features,
        } => (Tier::Trunk, in_features, out_features),
        HeadSpec::PerBranch { in_features } => (Tier::Branch, in_features, 1),
    };
    out.push(LayerTemplate {
        tier,
        stage: "head".into(),
        name: "head.fc".into(),
        kind: LayerKind::Linear {
            in_features,
            out_features,
        },
        out_hw: (1, 1),
    });
    Ok(out)
}

impl ModelSpec {
    /// Owners instantiated for a tier, given the active classes.
    pub fn owners(&self, tier: Tier) -> Vec<Owner> {
        match tier {
            Tier::Trunk => vec![Owner::Trunk],
            Tier::Superclass => self.active_superclasses().into_iter().map(Owner::Superclass).collect(),
            Tier::Branch => self.active_classes.iter().map(|&i| Owner::Branch(i)).collect(),
        }
    }

    /// Every tensor (name, shape, trainable) the model needs, in a stable order.
    pub fn tensor_slots(&self) -> Result<Vec<(String, Vec<usize>, bool)>> {
        let templates = layer_templates(self)?;
        let mut out = Vec::new();
        for tier in [Tier::Trunk, Tier::Superclass, Tier::Branch] {
            for owner in self.owners(tier) {
                for t in templates.iter().filter(|t| t.tier == tier) {
                    for (suffix, shape, trainable) in t.tensors() {
                        out.push((owner.tensor_name(&t.name, suffix), shape, trainable));
                    }
                }
            }
        }
        Ok(out)
    }
}
