use super::{BlockSpec, HeadSpec, ModelSpec, StageSpec, StemSpec, SuperclassTier, Variant};
use crate::error::{HlfpError, Result};

const INPUT: [usize; 3] = [3, 224, 224];

fn check_classes(k: usize) -> Result<()> {
    if k == 0 {
        return Err(HlfpError::InvalidArgument("number of classes must be >= 1".into()));
    }
    Ok(())
}

fn bottleneck_stage(name: &str, cin: usize, mid: usize, cout: usize, stride: usize, reps: usize) -> StageSpec {
    StageSpec::new(name, BlockSpec::bottleneck(cin, mid, cout, stride), reps, 1)
}

/// conv2..conv5 of the 50/152-layer residual network with the given repetitions.
fn resnet_bottleneck_stages(reps: [usize; 4]) -> Vec<StageSpec> {
    vec![
        bottleneck_stage("conv2", 64, 64, 256, 1, reps[0]),
        bottleneck_stage("conv3", 256, 128, 512, 2, reps[1]),
        bottleneck_stage("conv4", 512, 256, 1024, 2, reps[2]),
        bottleneck_stage("conv5", 1024, 512, 2048, 2, reps[3]),
    ]
}

/// Canonical residual network with `k` outputs.
pub fn build_resnet(depth: usize, k: usize) -> Result<ModelSpec> {
    check_classes(k)?;
    let (variant, stages) = match depth {
        18 => {
            let basic = |name: &str, cin, cout, stride| StageSpec::new(name, BlockSpec::basic(cin, cout, stride), 2, 1);
            (
                Variant::Resnet18,
                vec![
                    basic("conv2", 64, 64, 1),
                    basic("conv3", 64, 128, 2),
                    basic("conv4", 128, 256, 2),
                    basic("conv5", 256, 512, 2),
                ],
            )
        }
        50 => (Variant::Resnet50, resnet_bottleneck_stages([3, 4, 6, 3])),
        152 => (Variant::Resnet152, resnet_bottleneck_stages([3, 8, 36, 3])),
        other => {
            return Err(HlfpError::Unsupported(format!(
                "residual depth {other} (supported: 18, 50, 152)"
            )))
        }
    };
    let features = stages.last().map(|s| s.block.out_channels).unwrap_or(64);
    Ok(ModelSpec {
        name: variant.as_str().to_string(),
        variant,
        input_shape: INPUT,
        num_classes: k,
        active_classes: (1..=k).collect(),
        stem: StemSpec::standard(64),
        trunk_stages: stages,
        superclass: None,
        branch_stages: Vec::new(),
        head: HeadSpec::Shared {
            in_features: features,
            out_features: k,
        },
    })
}

/// Stem, conv2 and conv3 of the 50-layer network: the trunk of the early split-point variants.
fn early_trunk() -> Vec<StageSpec> {
    let mut stages = resnet_bottleneck_stages([3, 4, 6, 3]);
    stages.truncate(2);
    stages
}

/// Trunk of the late split-point variants, which also shares conv4.
fn late_trunk() -> Vec<StageSpec> {
    let mut stages = resnet_bottleneck_stages([3, 4, 6, 3]);
    stages.truncate(3);
    stages
}

fn with_parallelism(mut stages: Vec<StageSpec>, par: usize) -> Vec<StageSpec> {
    for s in &mut stages {
        s.parallelism = par;
    }
    stages
}

/// Branch bodies of the flat class-branch variants; every stage is a single
/// stride-2 bottleneck with a projection shortcut.
fn branch_body(variant: Variant) -> (Vec<StageSpec>, usize) {
    let s = bottleneck_stage;
    match variant {
        Variant::HlfpSmall | Variant::HlfpNested => (
            vec![
                s("conv4", 512, 128, 512, 2, 1),
                s("conv5", 512, 64, 256, 2, 1),
                s("conv6", 256, 32, 128, 2, 1),
            ],
            128,
        ),
        Variant::HlfpBig => (
            vec![
                s("conv4", 512, 256, 1024, 2, 1),
                s("conv5", 1024, 128, 512, 2, 1),
                s("conv6", 512, 64, 256, 2, 1),
            ],
            256,
        ),
        Variant::HlfpLateSp | Variant::Hlfp1bLateSp => (
            vec![
                s("conv5", 1024, 128, 512, 2, 1),
                s("conv6", 512, 64, 256, 2, 1),
                s("conv7", 256, 32, 128, 2, 1),
            ],
            128,
        ),
        // The split-point stage carries twice the channels of the late variant.
        Variant::HlfpLateBigSp => (
            vec![
                s("conv5", 1024, 256, 1024, 2, 1),
                s("conv6", 1024, 64, 256, 2, 1),
                s("conv7", 256, 32, 128, 2, 1),
            ],
            128,
        ),
        Variant::Resnet18 | Variant::Resnet50 | Variant::Resnet152 => unreachable!("no branch body"),
    }
}

/// One of the flat class-branch variants with `k` classes.
pub fn build_hlfp(variant: Variant, k: usize) -> Result<ModelSpec> {
    check_classes(k)?;
    let (trunk, branches, head) = match variant {
        Variant::HlfpSmall | Variant::HlfpBig => {
            let (body, width) = branch_body(variant);
            (
                early_trunk(),
                with_parallelism(body, k),
                HeadSpec::PerBranch { in_features: width },
            )
        }
        Variant::HlfpLateSp | Variant::HlfpLateBigSp => {
            let (body, width) = branch_body(variant);
            (
                late_trunk(),
                with_parallelism(body, k),
                HeadSpec::PerBranch { in_features: width },
            )
        }
        // A single copy of the late branch body, shared by all classes, and a k-way head.
        Variant::Hlfp1bLateSp => {
            let (body, width) = branch_body(variant);
            let mut trunk = late_trunk();
            trunk.extend(body);
            (
                trunk,
                Vec::new(),
                HeadSpec::Shared {
                    in_features: width,
                    out_features: k,
                },
            )
        }
        Variant::HlfpNested => {
            return Err(HlfpError::InvalidArgument(
                "the nested variant needs a superclass map; use build_hlfp_nested".into(),
            ))
        }
        other => return Err(HlfpError::Unsupported(format!("{other} is not a class-branch variant"))),
    };
    Ok(ModelSpec {
        name: variant.as_str().to_string(),
        variant,
        input_shape: INPUT,
        num_classes: k,
        active_classes: (1..=k).collect(),
        stem: StemSpec::standard(64),
        trunk_stages: trunk,
        superclass: None,
        branch_stages: branches,
        head,
    })
}

/// The small variant with its first branch stage (conv4) turned into a
/// superclass tier: one conv4 copy per superclass, conv5/conv6 and the head
/// per class. `superclass_map[i - 1]` is the superclass of class `i`.
pub fn build_hlfp_nested(superclass_map: &[usize]) -> Result<ModelSpec> {
    let k = superclass_map.len();
    check_classes(k)?;
    if let Some(pos) = superclass_map.iter().position(|&j| j == 0) {
        return Err(HlfpError::InvalidArgument(format!(
            "class {} maps to superclass 0; superclasses are numbered from 1",
            pos + 1
        )));
    }
    let s = superclass_map.iter().copied().max().unwrap_or(0);
    let mut used = vec![false; s];
    for &j in superclass_map {
        used[j - 1] = true;
    }
    if let Some(missing) = used.iter().position(|u| !u) {
        return Err(HlfpError::InvalidArgument(format!(
            "superclass {} has no classes (map must be onto 1..={s})",
            missing + 1
        )));
    }

    let (mut body, width) = branch_body(Variant::HlfpNested);
    let tier_stage = body.remove(0);
    Ok(ModelSpec {
        name: Variant::HlfpNested.as_str().to_string(),
        variant: Variant::HlfpNested,
        input_shape: INPUT,
        num_classes: k,
        active_classes: (1..=k).collect(),
        stem: StemSpec::standard(64),
        trunk_stages: early_trunk(),
        superclass: Some(SuperclassTier {
            map: superclass_map.to_vec(),
            stages: with_parallelism(vec![tier_stage], s),
        }),
        branch_stages: with_parallelism(body, k),
        head: HeadSpec::PerBranch { in_features: width },
    })
}

/// Dispatches to the matching builder. The nested variant needs a superclass
/// map; without one every class gets a private superclass.
pub fn build_variant(variant: Variant, k: usize, superclass_map: Option<&[usize]>) -> Result<ModelSpec> {
    match variant {
        Variant::Resnet18 => build_resnet(18, k),
        Variant::Resnet50 => build_resnet(50, k),
        Variant::Resnet152 => build_resnet(152, k),
        Variant::HlfpNested => match superclass_map {
            Some(map) if map.len() == k => build_hlfp_nested(map),
            Some(map) => Err(HlfpError::InvalidArgument(format!(
                "superclass map covers {} classes, expected {k}",
                map.len()
            ))),
            None => build_hlfp_nested(&(1..=k).collect::<Vec<_>>()),
        },
        v => build_hlfp(v, k),
    }
}
