use polynet::data::{
    augment, export_dataset, flip_horizontal, import_dataset, resize_bilinear, sample_crop, synth_dataset,
    AugmentConfig, Dataset, Split,
};
use polynet::rng;
use polynet::tensor::Tensor;
use proptest::prelude::*;

/// Ridge regression onto one-hot targets, solved in the dual
/// `(X Xᵀ + λI) α = Y` with a Cholesky factorization.
fn linear_probe_accuracy(ds: &Dataset, lambda: f64) -> f64 {
    let train = ds.indices(Split::Train);
    let val = ds.indices(Split::Val);
    let feat = |i: usize| -> Vec<f64> { ds.images[i].to_f64_vec() };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| feat(i)).collect();
    let n = xs.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = dot(&xs[i], &xs[j]) + 1.0; // +1: bias feature
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] += lambda;
    }
    // Cholesky k = L Lᵀ in place (lower triangle)
    for j in 0..n {
        let mut d = k[j * n + j];
        for p in 0..j {
            d -= k[j * n + p] * k[j * n + p];
        }
        let d = d.sqrt();
        k[j * n + j] = d;
        for i in j + 1..n {
            let mut s = k[i * n + j];
            for p in 0..j {
                s -= k[i * n + p] * k[j * n + p];
            }
            k[i * n + j] = s / d;
        }
    }
    let solve = |b: &mut Vec<f64>| {
        for i in 0..n {
            let mut s = b[i];
            for p in 0..i {
                s -= k[i * n + p] * b[p];
            }
            b[i] = s / k[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for p in i + 1..n {
                s -= k[p * n + i] * b[p];
            }
            b[i] = s / k[i * n + i];
        }
    };
    let alphas: Vec<Vec<f64>> = (0..ds.classes)
        .map(|c| {
            let mut y: Vec<f64> = train.iter().map(|&i| if ds.labels[i] == c { 1.0 } else { 0.0 }).collect();
            solve(&mut y);
            y
        })
        .collect();
    let mut correct = 0;
    for &v in &val {
        let x = feat(v);
        let kv: Vec<f64> = xs.iter().map(|t| dot(t, &x) + 1.0).collect();
        let scores: Vec<f64> = alphas.iter().map(|a| dot(a, &kv)).collect();
        let best = (0..ds.classes).fold(0, |b, c| if scores[c] > scores[b] { c } else { b });
        correct += (best == ds.labels[v]) as usize;
    }
    correct as f64 / val.len() as f64
}

#[test]
fn linear_probe_learns_but_does_not_saturate() {
    let ds = synth_dataset(1000, 4, 32, 11).unwrap();
    let acc = linear_probe_accuracy(&ds, 100.0);
    println!("linear probe val accuracy {acc:.3}");
    assert!(acc >= 0.8, "linear probe accuracy {acc}");
}

#[test]
fn split_is_roughly_ninety_ten() {
    let ds = synth_dataset(2000, 4, 8, 0).unwrap();
    let val = ds.indices(Split::Val).len();
    assert!((150..=250).contains(&val), "{val} validation samples");
}

#[test]
fn degenerate_augment_is_identity() {
    let ds = synth_dataset(4, 2, 16, 1).unwrap();
    let cfg = AugmentConfig::identity(16);
    let mut r = rng::stream(1, "aug");
    for img in &ds.images {
        let out = augment(img, &cfg, &mut r);
        assert_eq!(out.data(), img.data());
    }
}

#[test]
fn double_flip_restores() {
    let ds = synth_dataset(2, 2, 9, 1).unwrap();
    let img = &ds.images[0];
    let cfg = AugmentConfig { flip_prob: 1.0, ..AugmentConfig::identity(9) };
    let mut r = rng::stream(1, "aug");
    let once = augment(img, &cfg, &mut r);
    assert_ne!(once.data(), img.data());
    assert_eq!(augment(&once, &cfg, &mut r).data(), img.data());
    assert_eq!(flip_horizontal(&flip_horizontal(img)), *img);
}

#[test]
fn area_distribution_reaches_both_ends() {
    let cfg = AugmentConfig::standard(32);
    let mut r = rng::stream(5, "crops");
    let (mut lo, mut hi) = (f64::MAX, 0.0f64);
    for _ in 0..10_000 {
        let b = sample_crop(32, 32, &cfg, &mut r);
        let a = b.area_fraction(32, 32);
        lo = lo.min(a);
        hi = hi.max(a);
    }
    assert!(lo < 0.1 && hi > 0.95, "area range [{lo}, {hi}]");
}

#[test]
fn export_import_roundtrip() {
    let ds = synth_dataset(12, 3, 8, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&ds, dir.path()).unwrap();
    let back = import_dataset(dir.path()).unwrap();
    assert_eq!(back.images, ds.images);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.splits, ds.splits);
    assert_eq!(back.classes, 3);
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn crops_respect_bounds(h in 1usize..64, w in 1usize..64, seed in any::<u64>()) {
        let cfg = AugmentConfig::standard(8);
        let mut r = rng::stream(seed, "p");
        let b = sample_crop(h, w, &cfg, &mut r);
        prop_assert!(b.top + b.height <= h && b.left + b.width <= w);
        prop_assert!(b.height >= 1 && b.width >= 1);
    }

    #[test]
    fn augment_output_shape(h in 1usize..40, w in 1usize..40, out in 1usize..20, seed in any::<u64>()) {
        let img = Tensor::<f32>::full(&[3, h, w], 1.5);
        let cfg = AugmentConfig::standard(out);
        let o = augment(&img, &cfg, &mut rng::stream(seed, "p"));
        prop_assert_eq!(o.shape(), &[3, out, out][..]);
        prop_assert!(o.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn resize_constant_exact(c in 1usize..3, h in 1usize..20, w in 1usize..20, oh in 1usize..30, ow in 1usize..30, v in -10.0f64..10.0) {
        let img = Tensor::<f64>::full(&[c, h, w], v);
        let o = resize_bilinear(&img, oh, ow);
        prop_assert!(o.data().iter().all(|&x| x == v));
    }
}
