mod common;

use std::collections::BTreeSet;
use std::sync::Mutex;

use common::*;
use hlfp_core::parallel::infer_on;
use hlfp_core::parallel::worker_pool;
use hlfp_core::tensor::ops::softmax_row;
use hlfp_core::*;
use proptest::prelude::*;
use proptest::sample::Index;

/// Variants with one branch per class. The single-path variant with a
/// shared head has no branches to cut out or attend to.
const HLFP: [Variant; 4] = [
    Variant::HlfpSmall,
    Variant::HlfpBig,
    Variant::HlfpLateSp,
    Variant::HlfpLateBigSp,
];

fn set_from(picks: &[Index], k: usize) -> CutoutSet {
    let classes: BTreeSet<usize> = picks.iter().map(|p| p.index(k) + 1).collect();
    CutoutSet::new(classes.into_iter().collect(), k).unwrap()
}

fn micro(v: Variant, k: usize) -> ModelSpec {
    build_variant(v, k, None)
        .unwrap()
        .with_width_divisor(8)
        .unwrap()
        .with_input_size(32, 32)
}

fn micro_nested(map: &[usize]) -> ModelSpec {
    build_hlfp_nested(map)
        .unwrap()
        .with_width_divisor(8)
        .unwrap()
        .with_input_size(32, 32)
}

/// A surjective map of `k` classes onto `1..=s`.
fn superclass_map(k: usize, s: usize, extra: &[Index]) -> Vec<usize> {
    (0..k)
        .map(|i| {
            if i < s {
                i + 1
            } else {
                extra[i % extra.len()].index(s) + 1
            }
        })
        .collect()
}

/// Boundaries where computation fans out to more owners, and the parallelism of each tier.
fn count_splits(m: &ModelSpec) -> (usize, Vec<(Tier, usize)>) {
    let tiers: Vec<(Tier, usize)> = m.path_stages().map(|(t, s)| (t, s.parallelism)).collect();
    let splits = tiers.windows(2).filter(|w| w[0].0 != w[1].0).count();
    (splits, tiers)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_point_structure(vi in 0usize..4, k in 2usize..200, s in 1usize..20, extra in prop::collection::vec(any::<Index>(), 1..8)) {
        let m = build_variant(HLFP[vi], k, None).unwrap();
        let (splits, tiers) = count_splits(&m);
        prop_assert_eq!(splits, 1);
        let expected = |t: Tier| if t == Tier::Trunk { 1 } else { k };
        prop_assert!(tiers.iter().all(|&(t, p)| p == expected(t)));
        let s = s.min(k);
        let n = build_hlfp_nested(&superclass_map(k, s, &extra)).unwrap();
        let (splits, tiers) = count_splits(&n);
        prop_assert_eq!(splits, 2);
        for (t, p) in tiers {
            let want = match t {
                Tier::Trunk => 1,
                Tier::Superclass => s,
                Tier::Branch => k,
            };
            prop_assert_eq!(p, want);
        }
        prop_assert!(validate(&n).is_empty());
    }

    #[test]
    fn cutout_cost_is_linear(vi in 0usize..4, k in 1usize..300, picks in prop::collection::vec(any::<Index>(), 1..40)) {
        let m = build_variant(HLFP[vi], k, None).unwrap();
        let set = set_from(&picks, k);
        let full = cost_report(&m).unwrap();
        let cut = cost_report(&apply_cutout(&m, &set).unwrap()).unwrap();
        let n = set.classes().len() as u64;
        prop_assert_eq!(cut.total_params, full.trunk_params + n * full.per_branch_params);
        prop_assert_eq!(cut.total_macs, full.trunk_macs + n * full.per_branch_macs);
        let every = apply_cutout(&m, &CutoutSet::new((1..=k).collect(), k).unwrap()).unwrap();
        let every = cost_report(&every).unwrap();
        prop_assert_eq!((every.total_params, every.total_macs), (full.total_params, full.total_macs));
    }

    #[test]
    fn cost_grows_with_the_subset(vi in 0usize..4, k in 2usize..100, picks in prop::collection::vec(any::<Index>(), 1..30), add in any::<Index>()) {
        let m = build_variant(HLFP[vi], k, None).unwrap();
        let small = set_from(&picks, k);
        let missing: Vec<usize> = (1..=k).filter(|c| !small.contains(*c)).collect();
        prop_assume!(!missing.is_empty());
        let mut bigger = small.classes().to_vec();
        bigger.push(missing[add.index(missing.len())]);
        let big = CutoutSet::new(bigger, k).unwrap();
        let a = cost_report(&apply_cutout(&m, &small).unwrap()).unwrap();
        let b = cost_report(&apply_cutout(&m, &big).unwrap()).unwrap();
        prop_assert!(a.total_params < b.total_params);
        prop_assert!(a.total_macs < b.total_macs);
    }

    #[test]
    fn resnet50_params_are_affine_in_k(k in 1usize..5000) {
        prop_assert_eq!(count_params(&build_resnet(50, k).unwrap()).unwrap(), 23_508_032 + 2049 * k as u64);
    }

    #[test]
    fn cost_totals_are_sums_of_layers(vi in 0usize..4, k in 1usize..50) {
        let r = cost_report(&build_variant(HLFP[vi], k, None).unwrap()).unwrap();
        prop_assert_eq!(r.total_params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
        prop_assert_eq!(r.total_macs, r.per_layer.iter().map(|l| l.macs).sum::<u64>());
        let reversed: u64 = r.per_layer.iter().rev().map(|l| l.params).sum();
        prop_assert_eq!(r.total_params, reversed);
    }

    // beyond a spread of about 36 the largest probability rounds to exactly 1.0 in f64
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-15f32..15.0, 1..40)) {
        let p = softmax_row(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0 || logits.len() == 1 && v == 1.0));
    }
}

proptest! {
    // every case runs several forwards of a small network
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cutout_consistency_and_renormalization(
        vi in 0usize..4,
        k in 2usize..8,
        seed in any::<u64>(),
        picks in prop::collection::vec(any::<Index>(), 1..8),
    ) {
        let m = micro(HLFP[vi], k);
        let store = init_params(&m, seed).unwrap();
        let x = uniform(&mut rng(seed), &[2, 3, 32, 32]);
        let set = set_from(&picks, k);
        let full = forward_full(&m, &store, &x).unwrap();
        let cut = forward_cutout(&m, &store, &x, &set).unwrap();
        prop_assert!(cut.bitwise_eq(&full.restrict(&set).unwrap()));

        let every = CutoutSet::new((1..=k).collect(), k).unwrap();
        let p_full = subset_softmax(&full, &every, SoftmaxSign::Positive).unwrap();
        let p_sub = subset_softmax(&cut, &set, SoftmaxSign::Positive).unwrap();
        for (row, pf) in p_sub.iter().zip(&p_full) {
            let mass: f64 = set.classes().iter().map(|&c| pf[c - 1]).sum();
            for (q, &c) in row.iter().zip(set.classes()) {
                prop_assert!((q - pf[c - 1] / mass).abs() <= 1e-6);
            }
            // the same class wins under both normalizations
            let arg = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let restricted: Vec<f64> = set.classes().iter().map(|&c| pf[c - 1]).collect();
            prop_assert_eq!(arg(row), arg(&restricted));
        }
    }

    #[test]
    fn attention_is_local(vi in 0usize..4, k in 2usize..7, seed in any::<u64>(), target in any::<Index>(), gain in 0f32..3.0) {
        let m = micro(HLFP[vi], k);
        let store = init_params(&m, seed).unwrap();
        let x = uniform(&mut rng(seed ^ 1), &[2, 3, 32, 32]);
        let class = target.index(k) + 1;
        let stage = m.branch_stages[0].name.clone();
        let base = forward_full(&m, &store, &x).unwrap();
        let att = apply_attention(&m, &store, &x, &AttentionDirective::new(class, gain).at_stage(&stage)).unwrap();
        for c in (1..=k).filter(|&c| c != class) {
            let same = base.column(c).unwrap().iter().zip(att.column(c).unwrap()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
        let unit = apply_attention(&m, &store, &x, &AttentionDirective::new(class, 1.0).at_stage(&stage)).unwrap();
        prop_assert!(unit.bitwise_eq(&base));
    }

    #[test]
    fn nested_cutout_runs_exactly_the_needed_tiers(
        k in 2usize..8,
        s in 1usize..5,
        extra in prop::collection::vec(any::<Index>(), 1..8),
        picks in prop::collection::vec(any::<Index>(), 1..8),
    ) {
        let s = s.min(k);
        let map = superclass_map(k, s, &extra);
        let m = micro_nested(&map);
        let store = init_params(&m, 1).unwrap();
        let x = uniform(&mut rng(2), &[1, 3, 32, 32]);
        let set = set_from(&picks, k);
        let cut = apply_cutout(&m, &set).unwrap();
        let trace = Mutex::new(Vec::new());
        let opts = ForwardOptions { trace: Some(&trace), ..Default::default() };
        let logits = forward(&cut, &store, &x, &opts).unwrap();
        prop_assert!(logits.bitwise_eq(&forward_full(&m, &store, &x).unwrap().restrict(&set).unwrap()));
        let ran: BTreeSet<usize> = trace.into_inner().unwrap().into_iter().filter_map(|o| match o {
            Owner::Superclass(j) => Some(j),
            _ => None,
        }).collect();
        let needed: BTreeSet<usize> = set.classes().iter().map(|&c| map[c - 1]).collect();
        prop_assert_eq!(ran, needed);
    }

    #[test]
    fn parallel_matches_serial(vi in 0usize..4, k in 2usize..9, workers in 1usize..10, seed in any::<u64>(), picks in prop::collection::vec(any::<Index>(), 1..8)) {
        let m = micro(HLFP[vi], k);
        let store = init_params(&m, seed).unwrap();
        let x = uniform(&mut rng(seed), &[2, 3, 32, 32]);
        let pool = worker_pool(workers).unwrap();
        prop_assert!(infer_on(&pool, &m, &store, &x).unwrap().bitwise_eq(&infer_serial(&m, &store, &x).unwrap()));
        // cutout and parallel compose
        let set = set_from(&picks, k);
        let cut = apply_cutout(&m, &set).unwrap();
        prop_assert!(infer_on(&pool, &cut, &store, &x).unwrap().bitwise_eq(&forward_cutout(&m, &store, &x, &set).unwrap()));
    }

    #[test]
    fn forward_is_deterministic(vi in 0usize..4, k in 2usize..6, seed in any::<u64>()) {
        let m = micro(HLFP[vi], k);
        let a = init_params(&m, seed).unwrap();
        let b = init_params(&m, seed).unwrap();
        let x = uniform(&mut rng(seed), &[1, 3, 32, 32]);
        prop_assert!(forward_full(&m, &a, &x).unwrap().bitwise_eq(&forward_full(&m, &b, &x).unwrap()));
    }
}
