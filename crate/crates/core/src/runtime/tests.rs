use super::*;
use crate::arch::{build_hlfp, build_hlfp_nested, Variant};
use rand::Rng;

/// Eighth-width small variant at 32x32: every mechanism, negligible cost.
fn micro(k: usize) -> ModelSpec {
    build_hlfp(Variant::HlfpSmall, k)
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

fn input(model: &ModelSpec, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = model.input_shape;
    Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0..1.0))
}

/// Non-trivial running statistics so inference normalization is not the identity.
fn randomized_params(model: &ModelSpec, seed: u64) -> ParamStore {
    let mut store = init_params(model, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let names: Vec<String> = store.buffers().map(|(n, _)| n.clone()).collect();
    for n in names {
        let b = store.buffer_mut(&n).unwrap();
        for v in b.data_mut() {
            *v = if n.ends_with("running_var") {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(-0.2..0.2)
            };
        }
    }
    store
}

#[test]
fn single_class_model_has_one_logit() {
    let m = micro(1);
    let p = init_params(&m, 1).unwrap();
    let y = forward_full(&m, &p, &input(&m, 2, 0)).unwrap();
    assert_eq!(y.classes, vec![1]);
    assert_eq!(y.values.shape(), &[2, 1]);
}

#[test]
fn duplicated_branch_parameters_give_equal_logits() {
    let m = micro(3);
    let mut p = randomized_params(&m, 2);
    let copies: Vec<(String, Tensor)> = p
        .tensors()
        .into_iter()
        .filter(|(n, _)| n.starts_with("branch1."))
        .map(|(n, t)| (n.replacen("branch1.", "branch3.", 1), t.clone()))
        .collect();
    for (n, t) in copies {
        p.set(&n, t).unwrap();
    }
    let y = forward_full(&m, &p, &input(&m, 3, 1)).unwrap();
    let (a, b) = (y.column(1).unwrap(), y.column(3).unwrap());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(y.column(2).unwrap(), a);
}

#[test]
fn nested_identity_equals_flat_with_tier_folded_into_branches() {
    let k = 4;
    let nested = micro_nested(&(1..=k).collect::<Vec<_>>());
    let flat = micro(k);
    let pn = randomized_params(&nested, 3);
    let mut pf = randomized_params(&flat, 99);
    for (name, t) in pn.tensors() {
        let target = match name.strip_prefix("superclass") {
            Some(rest) => format!("branch{rest}"),
            None => name.to_string(),
        };
        pf.set(&target, t.clone()).unwrap();
    }
    let x = input(&flat, 2, 4);
    let a = forward_full(&nested, &pn, &x).unwrap();
    let b = forward_full(&flat, &pf, &x).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn cutout_is_restriction_of_full() {
    let m = micro(6);
    let p = randomized_params(&m, 5);
    let x = input(&m, 2, 6);
    let full = forward_full(&m, &p, &x).unwrap();
    assert!(forward_cutout(&m, &p, &x, &CutoutSet::full(6))
        .unwrap()
        .bitwise_eq(&full));
    for text in ["4", "1-3", "2,5,6"] {
        let c = CutoutSet::parse(text, 6).unwrap();
        let cut = forward_cutout(&m, &p, &x, &c).unwrap();
        assert!(cut.bitwise_eq(&full.restrict(&c).unwrap()), "{text}");
    }
}

#[test]
fn cutout_runs_only_selected_paths() {
    let m = micro_nested(&[1, 1, 2, 2, 3]);
    let p = randomized_params(&m, 7);
    let c = CutoutSet::parse("1,2,5", 5).unwrap();
    let trace = Mutex::new(Vec::new());
    let cut = apply_cutout(&m, &c).unwrap();
    forward(
        &cut,
        &p,
        &input(&m, 1, 8),
        &ForwardOptions {
            trace: Some(&trace),
            ..Default::default()
        },
    )
    .unwrap();
    let mut seen = trace.into_inner().unwrap();
    seen.sort();
    assert_eq!(
        seen,
        vec![
            Owner::Trunk,
            Owner::Superclass(1),
            Owner::Superclass(3),
            Owner::Branch(1),
            Owner::Branch(2),
            Owner::Branch(5)
        ]
    );
}

#[test]
fn cutout_loads_from_full_checkpoint_without_extra_tensors() {
    let m = micro(5);
    let full = randomized_params(&m, 9);
    let cut = apply_cutout(&m, &CutoutSet::parse("2-3", 5).unwrap()).unwrap();
    let mut store = init_params(&cut, 0).unwrap();
    crate::tensor::Checkpoint::from_store(&full)
        .load_into(&mut store)
        .unwrap();
    assert!(store
        .tensors()
        .iter()
        .all(|(n, _)| !n.starts_with("branch1.") && !n.starts_with("branch4.")));
    let x = input(&m, 1, 10);
    let a = forward_full(&cut, &store, &x).unwrap();
    let b = forward_full(&m, &full, &x).unwrap();
    assert!(a.bitwise_eq(&b.restrict(&CutoutSet::parse("2-3", 5).unwrap()).unwrap()));
}

#[test]
fn init_is_keyed_by_name() {
    let m = micro(4);
    let cut = apply_cutout(&m, &CutoutSet::parse("3", 4).unwrap()).unwrap();
    let a = init_params(&m, 11).unwrap();
    let b = init_params(&cut, 11).unwrap();
    for (n, t) in b.tensors() {
        assert!(a.get(n).unwrap().bitwise_eq(t), "{n}");
    }
    assert_ne!(init_params(&m, 12).unwrap(), a);
}

#[test]
fn subset_softmax_examples() {
    let logits = Logits {
        classes: (1..=6).collect(),
        values: Tensor::new(vec![1, 6], vec![0.3, -1.2, 2.0, 0.7, 0.7, -0.1]).unwrap(),
    };
    let one = subset_softmax(&logits, &CutoutSet::parse("3", 6).unwrap(), SoftmaxSign::Positive).unwrap();
    assert_eq!(one[0], vec![1.0]);

    let equal = Logits {
        classes: (1..=5).collect(),
        values: Tensor::full(&[1, 5], 0.42),
    };
    let p = subset_softmax(&equal, &CutoutSet::full(5), SoftmaxSign::Positive).unwrap();
    assert!(p[0].iter().all(|&v| (v - 0.2).abs() < 1e-12));

    // renormalization of the full softmax
    let c = CutoutSet::parse("1,3-4", 6).unwrap();
    let full = softmax_row(logits.row(0));
    let z: f64 = c.classes().iter().map(|&i| full[i - 1]).sum();
    let sub = subset_softmax(&logits, &c, SoftmaxSign::Positive).unwrap();
    for (p, &i) in sub[0].iter().zip(c.classes()) {
        assert!((p - full[i - 1] / z).abs() < 1e-12);
    }
    // the literal sign flips the ranking
    let neg = subset_softmax(&logits, &c, SoftmaxSign::Negative).unwrap();
    assert!(neg[0][1] < neg[0][0] && sub[0][1] > sub[0][0]);

    let bad = Logits {
        classes: vec![1, 2],
        values: Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap(),
    };
    assert!(subset_softmax(&bad, &CutoutSet::full(2), SoftmaxSign::Positive).is_err());
}

#[test]
fn unit_gain_is_bitwise_identity() {
    let m = micro(4);
    let p = randomized_params(&m, 13);
    let x = input(&m, 2, 14);
    let base = forward_full(&m, &p, &x).unwrap();
    for class in 1..=4 {
        let y = apply_attention(&m, &p, &x, &AttentionDirective::new(class, 1.0)).unwrap();
        assert!(y.bitwise_eq(&base));
    }
}

#[test]
fn zero_gain_is_local_and_matches_zero_feature_forward() {
    let m = micro(4);
    let p = randomized_params(&m, 15);
    let x = input(&m, 2, 16);
    let base = forward_full(&m, &p, &x).unwrap();
    let y = apply_attention(&m, &p, &x, &AttentionDirective::new(2, 0.0)).unwrap();
    for class in [1, 3, 4] {
        let (a, b) = (base.column(class).unwrap(), y.column(class).unwrap());
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
    let row = crate::arch::infer_shapes(&m)
        .unwrap()
        .into_iter()
        .find(|r| r.stage == "conv5")
        .unwrap();
    let zero = Tensor::zeros(&[2, row.channels, row.height, row.width]);
    let rest: Vec<_> = m
        .branch_stages
        .iter()
        .skip_while(|s| s.name != "conv5")
        .skip(1)
        .cloned()
        .collect();
    let (z, _) = segment_forward(&p, Owner::Branch(2), &rest, &zero, None, None).unwrap();
    let (oracle, _) = head_forward(&p, Owner::Branch(2), &z, false).unwrap();
    assert_eq!(y.column(2).unwrap(), oracle.data());
}

#[test]
fn attention_rejects_bad_directives() {
    let m = micro(3);
    let p = init_params(&m, 0).unwrap();
    let x = input(&m, 1, 0);
    for d in [
        AttentionDirective::new(4, 1.5),
        AttentionDirective::new(1, -1.0),
        AttentionDirective::new(1, f32::INFINITY),
        AttentionDirective::new(1, 1.5).at_stage("conv2"),
        AttentionDirective::new(1, 1.5).at_stage("conv9"),
    ] {
        assert!(apply_attention(&m, &p, &x, &d).is_err(), "{d:?}");
    }
    let cut = apply_cutout(&m, &CutoutSet::parse("1", 3).unwrap()).unwrap();
    assert!(apply_attention(&cut, &p, &x, &AttentionDirective::new(2, 1.5)).is_err());
}

#[test]
fn input_and_parameter_errors() {
    let m = micro(2);
    let p = init_params(&m, 0).unwrap();
    assert!(matches!(
        forward_full(&m, &p, &Tensor::zeros(&[1, 3, 16, 16])),
        Err(HlfpError::Shape(_))
    ));
    let mut missing = p.clone();
    missing.retain(|n| n != "branch2.head.fc.weight");
    assert!(matches!(
        forward_full(&m, &missing, &input(&m, 1, 0)),
        Err(HlfpError::MissingParameter(_))
    ));
}

#[test]
fn parallel_scheduler_matches_serial() {
    let m = micro_nested(&[1, 2, 2, 1, 3, 3, 3, 1]);
    let p = randomized_params(&m, 17);
    let x = input(&m, 2, 18);
    let serial = forward_full(&m, &p, &x).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let par = forward(
        &m,
        &p,
        &x,
        &ForwardOptions {
            scheduler: Scheduler::Pool(&pool),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(par.bitwise_eq(&serial));
}

#[test]
fn shared_head_models_run() {
    let m = crate::arch::build_resnet(50, 7)
        .unwrap()
        .with_width_divisor(16)
        .unwrap()
        .with_input_size(32, 32);
    let p = init_params(&m, 1).unwrap();
    let y = forward_full(&m, &p, &input(&m, 2, 2)).unwrap();
    assert_eq!(y.values.shape(), &[2, 7]);
    assert!(forward_cutout(&m, &p, &input(&m, 1, 2), &CutoutSet::full(3)).is_err());
}

#[test]
fn training_forward_matches_inference_columns_and_backward_covers_all_params() {
    let m = micro_nested(&[1, 1, 2]);
    let p = randomized_params(&m, 19);
    let x = input(&m, 3, 20);
    let (y, tape) = net::forward_train(&m, &p, &x).unwrap();
    assert_eq!(y.shape(), &[3, 3]);
    let (_, g) = crate::tensor::ops::softmax_cross_entropy(&y, &[0, 1, 2]).unwrap();
    let (grads, dx) = net::backward(&p, &tape, &g).unwrap();
    assert_eq!(dx.shape(), x.shape());
    for (name, param) in p.params() {
        let gr = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert_eq!(gr.shape(), param.value.shape());
    }
    assert_eq!(tape.stats.len(), p.buffers().count() / 2);
}
