use serde::Serialize;

use super::{layer_templates, HeadSpec, LayerKind, ModelSpec, Tier};
use crate::error::Result;

/// Output of one stage of a single path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeRow {
    pub stage: String,
    pub tier: Tier,
    pub reps: usize,
    pub parallelism: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Per-stage output shapes for the model's input: `input`, `stem` (after the
/// max-pool), one row per stage, then the pooled features and the head.
pub fn infer_shapes(model: &ModelSpec) -> Result<Vec<ShapeRow>> {
    let templates = layer_templates(model)?;
    let [c, h, w] = model.input_shape;
    let row = |stage: &str, tier, reps, parallelism, channels, (height, width): (usize, usize)| ShapeRow {
        stage: stage.to_string(),
        tier,
        reps,
        parallelism,
        channels,
        height,
        width,
    };
    let mut rows = vec![row("input", Tier::Trunk, 1, 1, c, (h, w))];

    let p = model.stem.pool;
    let stem_hw = templates[0].out_hw;
    let pooled = (
        (stem_hw.0 + 2 * p.padding - p.kernel) / p.stride + 1,
        (stem_hw.1 + 2 * p.padding - p.kernel) / p.stride + 1,
    );
    rows.push(row("stem", Tier::Trunk, 1, 1, model.stem.conv.out_channels, pooled));

    for (tier, stage) in model.path_stages() {
        let last = templates
            .iter()
            .rfind(|t| t.stage == stage.name && matches!(t.kind, LayerKind::Conv(_)))
            .expect("every stage has convolutions");
        rows.push(row(
            &stage.name,
            tier,
            stage.reps,
            stage.parallelism,
            stage.block.out_channels,
            last.out_hw,
        ));
    }

    let (head_tier, par, in_f, out_f) = match model.head {
        HeadSpec::Shared {
            in_features,
            out_features,
        } => (Tier::Trunk, 1, in_features, out_features),
        HeadSpec::PerBranch { in_features } => (Tier::Branch, model.active_classes.len(), in_features, 1),
    };
    rows.push(row("pool&flat", head_tier, 1, par, in_f, (1, 1)));
    rows.push(row("fc", head_tier, 1, par, out_f, (1, 1)));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_hlfp, build_resnet, Variant};

    fn spatial(rows: &[ShapeRow]) -> Vec<(String, usize)> {
        rows.iter().map(|r| (r.stage.clone(), r.height)).collect()
    }

    #[test]
    fn resnet50_canonical_resolutions() {
        let rows = infer_shapes(&build_resnet(50, 1000).unwrap()).unwrap();
        let got = spatial(&rows);
        let want = [
            ("input", 224),
            ("stem", 56),
            ("conv2", 56),
            ("conv3", 28),
            ("conv4", 14),
            ("conv5", 7),
        ];
        for (stage, h) in want {
            assert!(got.contains(&(stage.to_string(), h)), "{stage}: {got:?}");
        }
    }

    #[test]
    fn hlfp_small_branch_resolutions() {
        let rows = infer_shapes(&build_hlfp(Variant::HlfpSmall, 10).unwrap()).unwrap();
        let got = spatial(&rows);
        assert_eq!(
            got[2..6],
            [
                ("conv2".into(), 56),
                ("conv3".into(), 28),
                ("conv4".into(), 14),
                ("conv5".into(), 7)
            ]
        );
        assert_eq!(got[6], ("conv6".into(), 4));
        let fc = rows.last().unwrap();
        assert_eq!((fc.channels, fc.height, fc.parallelism), (1, 1, 10));
    }

    #[test]
    fn minimum_input_keeps_dims_positive() {
        for v in crate::arch::Variant::ALL {
            let m = crate::arch::build_variant(v, 3, None).unwrap().with_input_size(1, 1);
            let rows = infer_shapes(&m).unwrap();
            assert!(rows.iter().all(|r| r.height >= 1 && r.width >= 1), "{v}");
        }
    }

    #[test]
    fn zero_input_is_an_error() {
        let m = build_resnet(50, 10).unwrap().with_input_size(0, 8);
        assert!(infer_shapes(&m).is_err());
    }
}
