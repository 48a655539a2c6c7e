use std::fmt;

use serde::Serialize;

use super::{BlockKind, ConvSpec, HeadSpec, ModelSpec, StageSpec, Tier, Variant};

/// A broken structural rule. `layer` names the offending stage or layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub layer: String,
    pub rule: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.rule, self.layer, self.message)
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn push(&mut self, layer: impl Into<String>, rule: &'static str, message: impl Into<String>) {
        self.0.push(Violation {
            layer: layer.into(),
            rule,
            message: message.into(),
        });
    }
}

fn check_conv(v: &mut Collector, layer: &str, c: &ConvSpec) {
    let counts = [
        c.kernel_h,
        c.kernel_w,
        c.in_channels,
        c.out_channels,
        c.stride,
        c.groups,
    ];
    if counts.contains(&0) {
        v.push(
            layer,
            "conv-positive",
            format!("all convolution counts must be >= 1, got {c:?}"),
        );
        return;
    }
    if !c.in_channels.is_multiple_of(c.groups) || !c.out_channels.is_multiple_of(c.groups) {
        v.push(
            layer,
            "conv-groups",
            format!(
                "channels {}->{} not divisible by {} groups",
                c.in_channels, c.out_channels, c.groups
            ),
        );
    }
}

fn check_stage(v: &mut Collector, s: &StageSpec) {
    if s.reps == 0 {
        v.push(&s.name, "stage-reps", "a stage needs at least one repetition");
    }
    if s.parallelism == 0 {
        v.push(&s.name, "stage-parallelism", "parallelism must be >= 1");
    }
    let b = s.block;
    let needs_projection = b.stride != 1 || b.in_channels != b.out_channels;
    if b.has_projection != needs_projection {
        v.push(
            &s.name,
            "block-projection",
            format!(
                "projection shortcut must be present iff stride != 1 or channels change (stride {}, {}->{})",
                b.stride, b.in_channels, b.out_channels
            ),
        );
    }
    if b.kind == BlockKind::Basic && b.mid_channels != b.out_channels {
        v.push(&s.name, "block-basic", "basic blocks keep mid == out channels");
    }
    for bc in b.main_convs().iter().chain(b.projection().iter()) {
        check_conv(v, &format!("{}.{}", s.name, bc.conv_name), &bc.conv);
    }
}

/// Checks every structural invariant of a model. An empty list means the
/// model is well formed.
pub fn validate(model: &ModelSpec) -> Vec<Violation> {
    let mut v = Collector(Vec::new());
    let k = model.num_classes;

    check_conv(&mut v, "stem.conv", &model.stem.conv);
    if model.stem.conv.in_channels != model.input_shape[0] {
        v.push(
            "stem.conv",
            "input-channels",
            format!(
                "stem expects {} channels, input has {}",
                model.stem.conv.in_channels, model.input_shape[0]
            ),
        );
    }
    if model.stem.pool.kernel == 0 || model.stem.pool.stride == 0 {
        v.push("stem.pool", "pool-positive", "pool kernel and stride must be >= 1");
    }

    for (_, s) in model.path_stages() {
        check_stage(&mut v, s);
    }

    // Channel chaining, including the 1:k fan-out at every split-point.
    let mut prev_channels = model.stem.conv.out_channels;
    let mut prev_tier = Tier::Trunk;
    let mut prev_name = "stem".to_string();
    for (tier, s) in model.path_stages() {
        if s.block.in_channels != prev_channels {
            if tier != prev_tier {
                v.push(
                    &s.name,
                    "split-fanout",
                    format!(
                        "split-point {prev_name} -> {}: each of the {} parallel copies must consume the {} channels of {prev_name} (expected 1:{} fan-out), but it expects {}",
                        s.name, s.parallelism, prev_channels, s.parallelism, s.block.in_channels
                    ),
                );
            } else {
                v.push(
                    &s.name,
                    "channel-chain",
                    format!(
                        "expects {} input channels, {prev_name} produces {prev_channels}",
                        s.block.in_channels
                    ),
                );
            }
        }
        prev_channels = s.block.out_channels;
        prev_tier = tier;
        prev_name = s.name.clone();
    }

    // Split-points are the places where parallelism grows.
    let tiers: Vec<(Tier, &StageSpec)> = model.path_stages().collect();
    let mut splits: Vec<(usize, &str)> = Vec::new();
    let mut prev_par = 1;
    for (idx, (_, s)) in tiers.iter().enumerate() {
        if s.parallelism > prev_par {
            splits.push((idx, &s.name));
        } else if s.parallelism < prev_par {
            v.push(
                &s.name,
                "fan-in",
                format!(
                    "parallelism drops from {prev_par} to {}; parallel paths never merge",
                    s.parallelism
                ),
            );
        }
        prev_par = s.parallelism;
    }
    let allowed = usize::from(model.superclass.is_some()) + usize::from(model.has_branches());
    if splits.len() > allowed {
        let names: Vec<&str> = splits.iter().map(|(_, n)| *n).collect();
        v.push(
            names.join(", "),
            "split-count",
            format!(
                "{} split-points ({}) but a {} model allows {allowed}",
                splits.len(),
                names.join(", "),
                if model.superclass.is_some() {
                    "nested"
                } else {
                    "non-nested"
                }
            ),
        );
    } else {
        for &(idx, name) in &splits {
            let tier = tiers[idx].0;
            let tier_start = idx == 0 || tiers[idx - 1].0 != tier;
            if tier == Tier::Trunk || !tier_start {
                v.push(
                    name,
                    "split-location",
                    "a split-point must sit at the start of the superclass or branch tier",
                );
            }
        }
    }
    for (tier, s) in &tiers {
        if *tier == Tier::Trunk
            && s.parallelism != 1
            && splits.len() <= allowed
            && !splits.iter().any(|(_, n)| *n == s.name)
        {
            v.push(&s.name, "trunk-serial", "trunk stages are serial (parallelism 1)");
        }
    }

    // Class ownership.
    if k == 0 {
        v.push("model", "classes", "number of classes must be >= 1");
    }
    let active = &model.active_classes;
    if active.is_empty() {
        v.push("model", "classes", "no active classes");
    }
    if active.windows(2).any(|w| w[0] >= w[1]) {
        v.push("model", "classes", "active classes must be strictly increasing");
    }
    if active.iter().any(|&c| c == 0 || c > k) {
        v.push("model", "classes", format!("active classes must lie in 1..={k}"));
    }
    if !model.has_branches() && active.len() != k {
        v.push("model", "classes", "serial models cannot drop classes");
    }
    for s in &model.branch_stages {
        if s.parallelism != active.len() {
            v.push(
                &s.name,
                "branch-ownership",
                format!(
                    "{} branch copies for {} classes; every class owns exactly one branch",
                    s.parallelism,
                    active.len()
                ),
            );
        }
    }

    match (&model.superclass, model.variant) {
        (Some(tier), _) => {
            if tier.map.len() != k {
                v.push(
                    "superclass_map",
                    "superclass-total",
                    format!("map covers {} classes, expected {k}", tier.map.len()),
                );
            } else {
                let s = tier.num_superclasses();
                if tier.map.contains(&0) {
                    v.push("superclass_map", "superclass-total", "superclasses are numbered from 1");
                }
                let mut seen = vec![false; s];
                for &j in tier.map.iter().filter(|&&j| j > 0) {
                    seen[j - 1] = true;
                }
                if let Some(missing) = seen.iter().position(|x| !x) {
                    v.push(
                        "superclass_map",
                        "superclass-onto",
                        format!("superclass {} has no classes", missing + 1),
                    );
                }
                if !active.iter().any(|&c| c == 0 || c > k) {
                    let expected = tier.superclasses_for(active).len();
                    for st in &tier.stages {
                        if st.parallelism != expected {
                            v.push(
                                &st.name,
                                "superclass-ownership",
                                format!("{} tier copies, {expected} superclasses in use", st.parallelism),
                            );
                        }
                    }
                }
            }
            if tier.stages.is_empty() {
                v.push("superclass", "superclass-stages", "superclass tier has no stages");
            }
            if model.variant != Variant::HlfpNested {
                v.push(
                    "superclass",
                    "variant",
                    format!("{} has no superclass tier", model.variant),
                );
            }
        }
        (None, Variant::HlfpNested) => v.push("superclass", "variant", "nested model is missing its superclass tier"),
        (None, _) => {}
    }

    let features = model.feature_channels();
    match model.head {
        HeadSpec::Shared {
            in_features,
            out_features,
        } => {
            if model.has_branches() {
                v.push("head.fc", "head-kind", "branch models need one classifier per branch");
            }
            if out_features != k {
                v.push(
                    "head.fc",
                    "head-width",
                    format!("{out_features} outputs for {k} classes"),
                );
            }
            if in_features != features {
                v.push(
                    "head.fc",
                    "head-width",
                    format!("expects {in_features} features, gets {features}"),
                );
            }
        }
        HeadSpec::PerBranch { in_features } => {
            if !model.has_branches() {
                v.push("head.fc", "head-kind", "per-branch classifier without branches");
            }
            if in_features != features {
                v.push(
                    "head.fc",
                    "head-width",
                    format!("expects {in_features} features, gets {features}"),
                );
            }
        }
    }

    v.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_hlfp, build_hlfp_nested, build_resnet, Variant};

    #[test]
    fn well_formed_models_pass() {
        assert!(validate(&build_hlfp(Variant::HlfpSmall, 10).unwrap()).is_empty());
        assert!(validate(&build_resnet(50, 1000).unwrap()).is_empty());
        assert!(validate(&build_hlfp_nested(&[1, 1, 2, 3, 3]).unwrap()).is_empty());
    }

    #[test]
    fn two_split_points_named_in_one_violation() {
        let mut m = build_hlfp(Variant::HlfpSmall, 10).unwrap();
        m.trunk_stages[1].parallelism = 2;
        let errs = validate(&m);
        assert_eq!(errs.len(), 1, "{errs:?}");
        assert_eq!(errs[0].rule, "split-count");
        assert!(errs[0].layer.contains("conv3") && errs[0].layer.contains("conv4"));
    }

    #[test]
    fn split_fanout_channel_mismatch() {
        let mut m = build_hlfp(Variant::HlfpSmall, 10).unwrap();
        m.branch_stages[0].block.in_channels = 256;
        let errs = validate(&m);
        assert!(
            errs.iter()
                .any(|e| e.rule == "split-fanout" && e.message.contains("1:10")),
            "{errs:?}"
        );
    }

    #[test]
    fn branch_count_must_match_classes() {
        let mut m = build_hlfp(Variant::HlfpSmall, 10).unwrap();
        m.branch_stages[1].parallelism = 9;
        let rules: Vec<_> = validate(&m).into_iter().map(|e| e.rule).collect();
        assert!(rules.contains(&"branch-ownership"));
        assert!(rules.contains(&"fan-in"));
    }

    #[test]
    fn surjective_superclass_map() {
        let mut m = build_hlfp_nested(&[1, 2, 2]).unwrap();
        m.superclass.as_mut().unwrap().map = vec![1, 3, 3];
        let rules: Vec<_> = validate(&m).into_iter().map(|e| e.rule).collect();
        assert!(rules.contains(&"superclass-onto"), "{rules:?}");
    }

    #[test]
    fn projection_rule_checked() {
        let mut m = build_resnet(50, 10).unwrap();
        m.trunk_stages[0].block.has_projection = false;
        assert_eq!(validate(&m)[0].rule, "block-projection");
    }

    #[test]
    fn zero_groups_reported() {
        let mut m = build_resnet(50, 10).unwrap();
        m.stem.conv.groups = 0;
        assert_eq!(validate(&m)[0].rule, "conv-positive");
        m.stem.conv.groups = 2;
        assert_eq!(validate(&m)[0].rule, "conv-groups");
    }
}
