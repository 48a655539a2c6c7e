use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hlfp_core::{
    build_variant, forward_cutout, infer_parallel, infer_serial, init_params, tiny_hlfp, CutoutSet, Tensor, Variant,
};

fn input(shape: [usize; 3], batch: usize) -> Tensor {
    let [c, h, w] = shape;
    Tensor::from_fn(&[batch, c, h, w], |i| ((i * 7919) % 255) as f32 / 127.5 - 1.0)
}

fn hlfp_modes(c: &mut Criterion) {
    let model = tiny_hlfp(10).unwrap();
    let store = init_params(&model, 0).unwrap();
    let x = input(model.input_shape, 1);
    let mut g = c.benchmark_group("tiny_hlfp_k10");
    g.sample_size(20);
    g.bench_function("serial", |b| b.iter(|| infer_serial(&model, &store, &x).unwrap()));
    for workers in [2, 4] {
        g.bench_with_input(BenchmarkId::new("parallel", workers), &workers, |b, &w| {
            b.iter(|| infer_parallel(&model, &store, &x, w).unwrap())
        });
    }
    let one = CutoutSet::new(vec![1], 10).unwrap();
    g.bench_function("single_branch", |b| {
        b.iter(|| forward_cutout(&model, &store, &x, &one).unwrap())
    });
    g.finish();
}

fn reference(c: &mut Criterion) {
    let model = build_variant(Variant::Resnet50, 10, None)
        .unwrap()
        .with_width_divisor(4)
        .unwrap()
        .with_input_size(64, 64);
    let store = init_params(&model, 0).unwrap();
    let x = input(model.input_shape, 1);
    let mut g = c.benchmark_group("resnet50_div4");
    g.sample_size(20);
    g.bench_function("serial", |b| b.iter(|| infer_serial(&model, &store, &x).unwrap()));
    g.finish();
}

criterion_group!(benches, hlfp_modes, reference);
criterion_main!(benches);
