//! Optimizer, schedule, stochastic paths and the training loop.

use polynet::builder::{load_checkpoint, lower, BlockArch, Model};
use polynet::data::{synth_dataset, AugmentConfig, Dataset};
use polynet::dsl::parse_network;
use polynet::tensor::{forward, forward_gated, Mode, ParamStore, Tensor};
use polynet::train::{
    gate_probabilities, lr_at, rmsprop_step, sample_gates, train, OptimizerHP, OverfitDetector, RmsPropState,
    StochasticPathConfig, TrainConfig, TrainError, TrainHistory, Trigger,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store(values: &[f64]) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.insert("k", "w", Tensor::from_f64(&[values.len()], values).unwrap(), true);
    p
}

fn value(p: &ParamStore<f64>) -> Vec<f64> {
    p.get("k", "w").unwrap().data().to_vec()
}

fn tiny() -> (Model<f32>, Dataset) {
    let cfg = parse_network("A: ir; B: poly-2").unwrap().with_input_size(8);
    let model = lower::<f32>(&cfg, &BlockArch::Dense { dim: 4, hidden: 8 }, 1.0, 0).unwrap();
    (model, synth_dataset(80, 4, 8, 1).unwrap())
}

fn quick(total: u64, seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 8, eval_every: 5, ..TrainConfig::desk(total, seed) }
}

#[test]
fn rmsprop_two_steps_by_hand() {
    let hp = OptimizerHP { decay: 0.9, epsilon: 1.0, ..OptimizerHP::large_scale() };
    let mut p = store(&[1.0, -2.0]);
    let mut s = RmsPropState::new(&p);
    let g1 = store(&[0.5, -1.0]);
    let g2 = store(&[-0.25, 2.0]);
    rmsprop_step(&mut p, &g1, &mut s, &hp, 0.1).unwrap();
    rmsprop_step(&mut p, &g2, &mut s, &hp, 0.05).unwrap();
    for (i, (w0, (a, b))) in [1.0f64, -2.0].iter().zip([(0.5f64, -0.25f64), (-1.0, 2.0)]).enumerate() {
        let s1 = 0.1 * a * a;
        let w1 = w0 - 0.1 * a / (s1 + 1.0).sqrt();
        let s2 = 0.9 * s1 + 0.1 * b * b;
        let w2 = w1 - 0.05 * b / (s2 + 1.0).sqrt();
        assert!((value(&p)[i] - w2).abs() < 1e-15, "coordinate {i}");
        assert!((s.sq.get("k", "w").unwrap().data()[i] - s2).abs() < 1e-15);
    }
}

#[test]
fn huge_epsilon_is_scaled_gradient_descent() {
    let eps = 1e12;
    let hp = OptimizerHP { epsilon: eps, ..OptimizerHP::large_scale() };
    let mut p = store(&[0.3, -0.7, 2.0]);
    let g = [0.4, -1.5, 3.0];
    let mut s = RmsPropState::new(&p);
    rmsprop_step(&mut p, &store(&g), &mut s, &hp, 0.45).unwrap();
    for (i, (&w0, &gi)) in [0.3, -0.7, 2.0].iter().zip(&g).enumerate() {
        let step = value(&p)[i] - w0;
        let want = -0.45 * gi / eps.sqrt();
        assert!((step - want).abs() <= 1e-6 * want.abs(), "{step} vs {want}");
    }
}

#[test]
fn rmsprop_rejects_misaligned_gradients() {
    let hp = OptimizerHP::large_scale();
    let mut p = store(&[1.0, 2.0]);
    let mut s = RmsPropState::new(&p);
    assert!(matches!(rmsprop_step(&mut p, &store(&[1.0]), &mut s, &hp, 0.1), Err(TrainError::Misaligned(_))));
    assert!(matches!(rmsprop_step(&mut p, &ParamStore::new(), &mut s, &hp, 0.1), Err(TrainError::Misaligned(_))));
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn schedule_is_a_nonincreasing_staircase(step in 5u64..50, total in 1u64..400, base in 0.001f64..1.0) {
        let hp = OptimizerHP { base_lr: base, lr_step: step, total_iters: total, ..OptimizerHP::large_scale() };
        let mut decays = 0;
        for i in 1..total {
            let (prev, cur) = (lr_at(i - 1, &hp), lr_at(i, &hp));
            prop_assert!(cur <= prev);
            if cur != prev {
                prop_assert_eq!(i % step, 0);
                decays += 1;
            }
        }
        prop_assert_eq!(decays, (total - 1) / step);
    }

    #[test]
    fn probabilities_rise_linearly(n in 2usize..40, max in 0.0f64..0.99) {
        let p = gate_probabilities(n, max);
        prop_assert_eq!(p.len(), n);
        prop_assert_eq!(p[0], 0.0);
        prop_assert!((p[n - 1] - max).abs() < 1e-15);
        for w in p.windows(3) {
            prop_assert!(((w[2] - w[1]) - (w[1] - w[0])).abs() < 1e-12);
        }
    }
}

#[test]
fn gate_frequencies_follow_probabilities() {
    let probs = [0.0, 0.1, 0.25];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40_000;
    let mut dropped = [0usize; 3];
    for _ in 0..n {
        for (j, m) in sample_gates(&[2, 2, 2], &probs, &mut rng).iter().enumerate() {
            dropped[j] += m.iter().filter(|&&k| !k).count();
        }
    }
    for (j, &p) in probs.iter().enumerate() {
        let trials = 2.0 * n as f64;
        let sigma = (p * (1.0 - p) / trials).sqrt();
        let freq = dropped[j] as f64 / trials;
        assert!((freq - p).abs() <= 4.0 * sigma.max(1e-12), "module {j}: {freq} vs {p}");
    }
}

#[test]
fn evaluation_ignores_gate_draws() {
    let (model, _) = tiny();
    let x: Tensor<f32> = polynet::data::synth_dataset(4, 4, 8, 2).unwrap().batch(&[0, 1, 2, 3]).0;
    let (plain, _) = forward(&model.graph, &model.params, &x, Mode::Eval).unwrap();
    let gates: Vec<Vec<f64>> = model.path_counts().iter().map(|&n| vec![0.0; n]).collect();
    let (gated, _) = forward_gated(&model.graph, &model.params, &x, Mode::Eval, Some(&gates)).unwrap();
    assert_eq!(plain, gated);
}

#[test]
fn zero_iterations_leave_the_model_alone() {
    let (model, ds) = tiny();
    let (out, hist) = train(model.clone(), &ds, &quick(0, 1)).unwrap();
    assert_eq!(out, model);
    assert!(hist.records.is_empty());
}

#[test]
fn training_is_reproducible() {
    let (model, ds) = tiny();
    let mut cfg = quick(20, 4);
    cfg.augment = Some(AugmentConfig::standard(8));
    cfg.stochastic = StochasticPathConfig { enabled: true, ..Default::default() };
    let (a, ha) = train(model.clone(), &ds, &cfg).unwrap();
    let (b, hb) = train(model.clone(), &ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let (c, _) = train(model, &ds, &quick(20, 5)).unwrap();
    assert_ne!(a.params, c.params);
    assert_eq!(a.meta.iteration, 20);
}

#[test]
fn history_records_and_jsonl() {
    let (model, ds) = tiny();
    let (_, hist) = train(model, &ds, &quick(23, 2)).unwrap();
    let its: Vec<u64> = hist.records.iter().map(|r| r.iteration).collect();
    assert_eq!(its, [5, 10, 15, 20, 23]);
    let mut buf = Vec::new();
    hist.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert_eq!(TrainHistory::read_jsonl(&text).unwrap(), hist.records);
}

#[test]
fn checkpoints_at_every_decay() {
    let dir = tempfile::tempdir().unwrap();
    let (model, ds) = tiny();
    let cfg = TrainConfig { checkpoint_dir: Some(dir.path().to_path_buf()), ..quick(35, 1) };
    assert_eq!(cfg.hp.lr_step, 10);
    let (trained, _) = train(model, &ds, &cfg).unwrap();
    for (name, it) in [("iter-10", 10), ("iter-20", 20), ("iter-30", 30), ("final", 35)] {
        let m: Model<f32> = load_checkpoint(&dir.path().join(name)).unwrap();
        assert_eq!(m.meta.iteration, it, "{name}");
    }
    let last: Model<f32> = load_checkpoint(&dir.path().join("final")).unwrap();
    assert_eq!(last, trained);
}

#[test]
fn manual_trigger_switches_gates_on() {
    let (model, ds) = tiny();
    let mut cfg = quick(20, 1);
    cfg.stochastic = StochasticPathConfig { enabled: true, trigger: Trigger::Manual { at_iteration: 12 }, ..Default::default() };
    let (_, hist) = train(model, &ds, &cfg).unwrap();
    assert_eq!(hist.gates_enabled_at, Some(12));
    let active: Vec<bool> = hist.records.iter().map(|r| r.gates_active).collect();
    assert_eq!(active, [false, false, true, true]);
}

#[test]
fn overfit_detector_needs_a_full_window() {
    let mut d = OverfitDetector::default();
    let streaks: Vec<usize> =
        [(1.0, 1.0), (0.9, 1.1), (0.8, 1.2), (0.7, 1.1), (0.6, 1.3)].iter().map(|&(t, v)| d.observe(t, v)).collect();
    assert_eq!(streaks, [0, 1, 2, 0, 1]);
}

#[test]
fn divergence_aborts_with_context() {
    let (model, ds) = tiny();
    let mut cfg = quick(50, 1);
    cfg.hp.base_lr = 1e200;
    match train(model, &ds, &cfg) {
        Err(TrainError::NonFinite { iteration, lr, .. }) => {
            assert!(iteration > 0 && iteration < 50);
            assert_eq!(lr, 1e200);
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn bad_settings_are_rejected() {
    let (model, ds) = tiny();
    let mut cfg = quick(5, 1);
    cfg.stochastic.max_prob = 1.0;
    assert!(matches!(train(model.clone(), &ds, &cfg), Err(TrainError::Config(_))));
    let mut cfg = quick(5, 1);
    cfg.hp.decay = 1.5;
    assert!(train(model.clone(), &ds, &cfg).is_err());
    let mut cfg = quick(5, 1);
    cfg.batch_size = 0;
    assert!(train(model, &ds, &cfg).is_err());
}
