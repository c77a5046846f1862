//! Top-k pooling and multi-crop evaluation.

use polynet::builder::{lower, BlockArch, Model};
use polynet::data::synth_dataset;
use polynet::dsl::parse_network;
use polynet::eval::{multicrop_eval, pool_count, topk_error, topk_pool, EvalError, PoolingConfig};
use proptest::prelude::*;

fn arb_scores() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..12, 1usize..5).prop_flat_map(|(crops, classes)| {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, classes), crops)
    })
}

fn model() -> Model<f64> {
    let cfg = parse_network("A: ir; B: mpoly-2").unwrap().with_input_size(12);
    lower::<f64>(&cfg, &BlockArch::Dense { dim: 4, hidden: 8 }, 1.0, 2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn pooling_ignores_crop_order(scores in arb_scores(), f in 0.01f64..=1.0, seed in 0u64..1000) {
        let mut shuffled = scores.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize * 31 + i * 17) % (i + 1));
        }
        prop_assert_eq!(topk_pool(&scores, f).unwrap(), topk_pool(&shuffled, f).unwrap());
    }

    #[test]
    fn pooling_is_monotone(scores in arb_scores(), f in 0.01f64..=1.0, crop in 0usize..12, bump in 0.0f64..1.0) {
        let crop = crop % scores.len();
        let mut raised = scores.clone();
        for v in raised[crop].iter_mut() {
            *v += bump;
        }
        let (a, b) = (topk_pool(&scores, f).unwrap(), topk_pool(&raised, f).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn extreme_fractions_are_max_and_mean(scores in arb_scores()) {
        let classes = scores[0].len();
        let max = topk_pool(&scores, 1e-6).unwrap();
        let mean = topk_pool(&scores, 1.0).unwrap();
        for c in 0..classes {
            let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            prop_assert_eq!(max[c], col.iter().copied().fold(f64::MIN, f64::max));
            let m = col.iter().sum::<f64>() / col.len() as f64;
            prop_assert!((mean[c] - m).abs() <= 1e-12);
        }
    }

    #[test]
    fn pool_count_bounds(crops in 1usize..100, f in 0.001f64..=1.0) {
        let k = pool_count(crops, f);
        prop_assert!(k >= 1 && k <= crops);
        prop_assert!(k as f64 >= f * crops as f64 - 1e-6);
    }
}

#[test]
fn top_k_error_counts() {
    let scores = vec![vec![0.1, 0.7, 0.2], vec![0.5, 0.3, 0.2], vec![0.2, 0.3, 0.5]];
    assert_eq!(topk_error(&scores, &[1, 1, 0], 1), 2.0 / 3.0);
    assert_eq!(topk_error(&scores, &[1, 1, 0], 2), 1.0 / 3.0);
    assert_eq!(topk_error(&scores, &[1, 1, 0], 3), 0.0);
}

#[test]
fn multicrop_is_bounded_and_stable() {
    let ds = synth_dataset(24, 4, 12, 3).unwrap();
    let m = model();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let cfg = PoolingConfig { scales: vec![1.0, 1.5], crops_per_scale: 6, top_fraction: 0.3 };
    let a = multicrop_eval(&m, &ds, &idx, &cfg).unwrap();
    let b = multicrop_eval(&m, &ds, &idx, &cfg).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.top1) && (0.0..=1.0).contains(&a.top5));
    assert!(a.top5 <= a.top1);
    assert_eq!(a.n_images, 24);
    assert!(a.skipped_scales.is_empty());
}

#[test]
fn scales_below_the_crop_are_skipped() {
    let ds = synth_dataset(6, 4, 12, 3).unwrap();
    let m = model();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let cfg = PoolingConfig { scales: vec![0.5, 1.0], crops_per_scale: 2, top_fraction: 0.5 };
    let r = multicrop_eval(&m, &ds, &idx, &cfg).unwrap();
    assert_eq!(r.skipped_scales, [0.5]);
    let none = PoolingConfig { scales: vec![0.5], ..cfg };
    assert!(matches!(multicrop_eval(&m, &ds, &idx, &none), Err(EvalError::NoScale)));
}
