use hlfp_core::{gen_synthetic, Dataset, Split, SyntheticSpec};
use nalgebra::{DMatrix, DVector};

/// Every 4th pixel of every channel, plus a constant feature.
fn features(ds: &Dataset) -> DMatrix<f64> {
    let [c, h, w] = ds.image_shape;
    let cols: Vec<usize> = (0..c)
        .flat_map(|ch| {
            (0..h)
                .step_by(4)
                .flat_map(move |y| (0..w).step_by(4).map(move |x| (ch * h + y) * w + x))
        })
        .collect();
    DMatrix::from_fn(ds.len(), cols.len() + 1, |i, j| {
        if j == cols.len() {
            1.0
        } else {
            ds.image(i)[cols[j]] as f64
        }
    })
}

fn signs(ds: &Dataset) -> DVector<f64> {
    DVector::from_iterator(ds.len(), ds.labels().iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }))
}

#[test]
fn two_classes_are_linearly_separable() {
    let spec = SyntheticSpec {
        num_classes: 2,
        per_class: 500,
        image_size: 64,
        seed: 11,
    };
    let (train, val) = (spec.generate(Split::Train).unwrap(), spec.generate(Split::Val).unwrap());
    let x = features(&train);
    let y = signs(&train);
    // ridge-regularized least squares on +-1 targets
    let mut gram = x.transpose() * &x;
    for i in 0..gram.nrows() {
        gram[(i, i)] += 1.0;
    }
    let w = gram.cholesky().expect("positive definite").solve(&(x.transpose() * y));
    let scores = features(&val) * w;
    let yv = signs(&val);
    let correct = scores.iter().zip(yv.iter()).filter(|(s, t)| s.signum() == **t).count();
    let acc = correct as f64 / val.len() as f64;
    assert!(acc > 0.9, "linear probe accuracy {acc}");
}

#[test]
fn generator_is_byte_identical_per_seed() {
    let a = gen_synthetic(10, 100, 64, 7).unwrap();
    let b = gen_synthetic(10, 100, 64, 7).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(a.len(), 1000);
    for c in 1..=10 {
        assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 100);
    }
}
