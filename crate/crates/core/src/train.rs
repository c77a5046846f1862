//! RMSProp, the step learning-rate schedule, stochastic paths and the
//! training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{save_checkpoint, BuildError, Model};
use crate::data::{augment, AugmentConfig, Dataset, Split};
use crate::eval::{evaluate, topk_error, EvalError};
use crate::rng;
use crate::tensor::{backward, forward_gated, softmax_cross_entropy, EngineError, Mode, ParamStore, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iteration} (lr {lr}){}", node.as_ref().map(|n| format!(", first bad value at {n}")).unwrap_or_default())]
    NonFinite { iteration: u64, lr: f64, node: Option<String> },
    #[error("gradient and parameter stores disagree at {0}")]
    Misaligned(String),
    #[error("invalid training settings: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHP {
    pub decay: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    pub lr_factor: f64,
    /// Iterations between learning-rate decays.
    pub lr_step: u64,
    pub total_iters: u64,
}

impl OptimizerHP {
    /// Decay 0.9, ε = 1, lr 0.45 decayed by 0.1 every 160K of 560K iterations.
    pub fn large_scale() -> Self {
        OptimizerHP { decay: 0.9, epsilon: 1.0, base_lr: 0.45, lr_factor: 0.1, lr_step: 160_000, total_iters: 560_000 }
    }

    /// Small-budget schedule: lr 0.045, with the step chosen as `total / 3.5`
    /// so that three decays happen before the end, as in the large schedule.
    pub fn desk(total_iters: u64) -> Self {
        OptimizerHP {
            decay: 0.9,
            epsilon: 1.0,
            base_lr: 0.045,
            lr_factor: 0.1,
            lr_step: ((total_iters as f64 / 3.5).round() as u64).max(1),
            total_iters,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.decay > 0.0
            && self.decay < 1.0
            && self.epsilon > 0.0
            && self.base_lr > 0.0
            && self.lr_factor > 0.0
            && self.lr_step > 0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("{self:?}")))
        }
    }
}

/// `base_lr · factor^floor(iter / lr_step)`.
///
/// Each decay is applied as one operation on the previous rate. When the
/// factor is the reciprocal of an integer (0.1) the step divides by that
/// integer, which keeps decimal rates such as 0.45 → 0.045 → 0.0045 exact.
pub fn lr_at(iter: u64, hp: &OptimizerHP) -> f64 {
    let decays = iter / hp.lr_step;
    let inv = 1.0 / hp.lr_factor;
    let divide = (inv - inv.round()).abs() < 1e-9;
    let mut lr = hp.base_lr;
    for _ in 0..decays {
        lr = if divide { lr / inv.round() } else { lr * hp.lr_factor };
    }
    lr
}

/// Squared-gradient running averages, one per trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState<T> {
    pub sq: ParamStore<T>,
}

impl<T: Scalar> RmsPropState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        RmsPropState { sq: params.zeros_like_trainable() }
    }
}

/// `s ← d·s + (1−d)·g²`, then `p ← p − lr·g / √(s + ε)`.
pub fn rmsprop_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut RmsPropState<T>,
    hp: &OptimizerHP,
    lr: f64,
) -> Result<(), TrainError> {
    let d = T::cast(hp.decay);
    let one_minus_d = T::cast(1.0 - hp.decay);
    let eps = T::cast(hp.epsilon);
    let lr = T::cast(lr);
    for (key, name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let at = || format!("{key}/{name}");
        let g = grads.get(key, name).ok_or_else(|| TrainError::Misaligned(at()))?;
        let s = state.sq.get_mut(key, name).ok_or_else(|| TrainError::Misaligned(at()))?;
        if g.shape() != p.value.shape() || s.shape() != p.value.shape() {
            return Err(TrainError::Misaligned(at()));
        }
        for ((pv, &gv), sv) in p.value.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
            *sv = d * *sv + one_minus_d * gv * gv;
            *pv -= lr * gv / (*sv + eps).sqrt();
        }
    }
    Ok(())
}

/// Drop probability of each of `modules` modules, rising linearly from 0 at
/// the bottom to `max_prob` at the top.
pub fn gate_probabilities(modules: usize, max_prob: f64) -> Vec<f64> {
    if modules <= 1 {
        return vec![0.0; modules.max(1)];
    }
    (0..modules).map(|j| max_prob * j as f64 / (modules - 1) as f64).collect()
}

/// Keep (`true`) or drop each non-identity path; module `j`'s paths drop
/// independently with probability `probs[j]`.
pub fn sample_gates(path_counts: &[usize], probs: &[f64], rng: &mut impl Rng) -> Vec<Vec<bool>> {
    assert_eq!(path_counts.len(), probs.len(), "one probability per module");
    path_counts
        .iter()
        .zip(probs)
        .map(|(&n, &p)| (0..n).map(|_| !(p > 0.0 && rng.gen_bool(p.min(1.0)))).collect())
        .collect()
}

/// Compensation for dropped paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Rescale {
    /// Kept paths pass unchanged and evaluation uses every path at full weight.
    #[default]
    None,
    /// Kept paths are multiplied by `1/(1−p)` during training.
    Train,
    /// Paths are multiplied by `1−p` at evaluation.
    Eval,
}

/// Multipliers the gate nodes apply for a sampled keep pattern.
pub fn gate_factors(keep: &[Vec<bool>], probs: &[f64], rescale: Rescale) -> Vec<Vec<f64>> {
    keep.iter()
        .zip(probs)
        .map(|(m, &p)| {
            let kept = if rescale == Rescale::Train && p < 1.0 { 1.0 / (1.0 - p) } else { 1.0 };
            m.iter().map(|&k| if k { kept } else { 0.0 }).collect()
        })
        .collect()
}

/// When stochastic paths switch on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Trigger {
    /// Active from the first iteration.
    Off,
    Manual { at_iteration: u64 },
    /// Switches on once validation loss has risen for `window` consecutive
    /// evaluations while training loss fell, and at least `min_gap`
    /// iterations have passed since the start.
    Auto { window: usize, min_gap: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticPathConfig {
    pub enabled: bool,
    pub max_prob: f64,
    pub trigger: Trigger,
    pub rescale: Rescale,
}

impl Default for StochasticPathConfig {
    fn default() -> Self {
        StochasticPathConfig { enabled: false, max_prob: 0.25, trigger: Trigger::Off, rescale: Rescale::None }
    }
}

impl StochasticPathConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.max_prob) {
            return Err(TrainError::Config(format!("max_prob {} outside [0, 1)", self.max_prob)));
        }
        if let Trigger::Auto { window: 0, .. } = self.trigger {
            return Err(TrainError::Config("auto trigger window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Tracks the overfitting signal for [`Trigger::Auto`].
#[derive(Clone, Debug, Default)]
pub struct OverfitDetector {
    last: Option<(f64, f64)>,
    streak: usize,
}

impl OverfitDetector {
    /// Feeds one evaluation; returns the current streak of evaluations with
    /// rising validation loss and falling training loss.
    pub fn observe(&mut self, train_loss: f64, val_loss: f64) -> usize {
        if let Some((t, v)) = self.last {
            if val_loss > v && train_loss < t {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.last = Some((train_loss, val_loss));
        self.streak
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hp: OptimizerHP,
    pub batch_size: usize,
    pub eval_every: u64,
    pub stochastic: StochasticPathConfig,
    /// `None` trains on the raw images.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
    /// Checkpoints go to `<dir>/iter-<n>` at every decay and `<dir>/final`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn desk(total_iters: u64, seed: u64) -> Self {
        TrainConfig {
            hp: OptimizerHP::desk(total_iters),
            batch_size: 16,
            eval_every: (total_iters / 10).max(1),
            stochastic: StochasticPathConfig::default(),
            augment: None,
            seed,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    /// Mean training batch loss since the previous record.
    pub train_loss: f64,
    /// Training batch top-1 error since the previous record.
    pub train_top1: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub lr: f64,
    pub gates_active: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    /// Iteration at which stochastic paths switched on.
    pub gates_enabled_at: Option<u64>,
    pub wall_ms: u64,
}

/// Wall time is not part of a run's identity.
impl PartialEq for TrainHistory {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.records == other.records && self.gates_enabled_at == other.gates_enabled_at
    }
}

impl TrainHistory {
    /// One JSON object per evaluation record.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Vec<EvalRecord>, serde_json::Error> {
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
    }
}

/// Endless shuffled pass over the training split.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn next_batch(&mut self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == 0 {
                    self.order.shuffle(rng);
                }
                let i = self.order[self.pos];
                self.pos = (self.pos + 1) % self.order.len();
                i
            })
            .collect()
    }
}

fn checkpoint<T: Scalar>(model: &Model<T>, dir: Option<&Path>, name: &str) -> Result<(), TrainError> {
    if let Some(dir) = dir {
        save_checkpoint(model, &dir.join(name))?;
    }
    Ok(())
}

/// Runs `cfg.hp.total_iters` RMSProp steps and returns the trained model with
/// its evaluation history.
///
/// Data order and augmentation draw from the `data` sub-stream of
/// `cfg.seed` and gate sampling from the `gates` sub-stream, so enabling
/// stochastic paths does not change which images are seen.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model<T>, TrainHistory), TrainError> {
    cfg.hp.validate()?;
    cfg.stochastic.validate()?;
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(TrainError::Config("batch_size and eval_every must be positive".into()));
    }
    if let Some(a) = &cfg.augment {
        a.validate().map_err(TrainError::Config)?;
    }
    let start = Instant::now();
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    if train_idx.is_empty() {
        return Err(TrainError::Config("dataset has no training samples".into()));
    }
    let mut data_rng = rng::stream(cfg.seed, "data");
    let mut gate_rng = rng::stream(cfg.seed, "gates");
    let mut sampler = Sampler { order: train_idx, pos: 0 };
    let mut state = RmsPropState::new(&model.params);
    let probs = gate_probabilities(model.modules.len(), cfg.stochastic.max_prob);
    let path_counts = model.path_counts();
    let mut detector = OverfitDetector::default();
    let mut gates_on = cfg.stochastic.enabled && cfg.stochastic.trigger == Trigger::Off;
    let mut history = TrainHistory { seed: cfg.seed, records: Vec::new(), gates_enabled_at: None, wall_ms: 0 };
    let set_eval_scales = |model: &mut Model<T>, on: bool| {
        if on && cfg.stochastic.rescale == Rescale::Eval {
            model.set_eval_scales(&probs.iter().map(|p| 1.0 - p).collect::<Vec<_>>());
        }
    };
    if gates_on {
        history.gates_enabled_at = Some(0);
        set_eval_scales(&mut model, true);
    }
    let (mut win_loss, mut win_wrong, mut win_n) = (0.0, 0.0, 0usize);
    let first_iter = model.meta.iteration;

    for it in 0..cfg.hp.total_iters {
        if let Trigger::Manual { at_iteration } = cfg.stochastic.trigger {
            if cfg.stochastic.enabled && !gates_on && it >= at_iteration {
                gates_on = true;
                history.gates_enabled_at = Some(it);
                set_eval_scales(&mut model, true);
            }
        }
        let lr = lr_at(it, &cfg.hp);
        let batch = sampler.next_batch(cfg.batch_size, &mut data_rng);
        let images: Vec<Tensor<T>> = batch
            .iter()
            .map(|&i| {
                let img: Tensor<T> = ds.images[i].cast();
                match &cfg.augment {
                    Some(a) => augment(&img, a, &mut data_rng),
                    None => img,
                }
            })
            .collect();
        let x = Tensor::stack(&images)?;
        let labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
        let gates = gates_on.then(|| {
            let keep = sample_gates(&path_counts, &probs, &mut gate_rng);
            gate_factors(&keep, &probs, cfg.stochastic.rescale)
        });

        let (logits, tape) = match forward_gated(&model.graph, &model.params, &x, Mode::Train, gates.as_deref()) {
            Ok(r) => r,
            Err(EngineError::NonFinite { node, op }) => {
                return Err(TrainError::NonFinite { iteration: it, lr, node: Some(format!("node {node} ({op})")) })
            }
            Err(e) => return Err(e.into()),
        };
        let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            let node = tape.first_non_finite().map(|(id, op)| format!("node {id} ({op})"));
            return Err(TrainError::NonFinite { iteration: it, lr, node });
        }
        let rows: Vec<Vec<f64>> = logits.to_f64_vec().chunks(ds.classes).map(<[f64]>::to_vec).collect();
        win_wrong += topk_error(&rows, &labels, 1) * labels.len() as f64;
        win_loss += loss * labels.len() as f64;
        win_n += labels.len();

        let grads = backward(&tape, &dlogits)?;
        let updates = tape.norm_updates().to_vec();
        drop(tape);
        for u in updates {
            *model.params.get_mut(&u.param.share_key, &u.param.tensor("running_mean")).expect("norm stats") =
                u.running_mean;
            *model.params.get_mut(&u.param.share_key, &u.param.tensor("running_var")).expect("norm stats") =
                u.running_var;
        }
        rmsprop_step(&mut model.params, &grads.params, &mut state, &cfg.hp, lr)?;
        model.meta.iteration = first_iter + it + 1;

        let done = it + 1;
        if done % cfg.eval_every == 0 || done == cfg.hp.total_iters {
            let val = if val_idx.is_empty() {
                crate::eval::Metrics { loss: f64::NAN, top1: f64::NAN, top5: f64::NAN, n: 0 }
            } else {
                evaluate(&model, ds, &val_idx, 64)?
            };
            let train_loss = win_loss / win_n.max(1) as f64;
            history.records.push(EvalRecord {
                iteration: done,
                train_loss,
                train_top1: win_wrong / win_n.max(1) as f64,
                val_loss: val.loss,
                val_top1: val.top1,
                val_top5: val.top5,
                lr,
                gates_active: gates_on,
            });
            log::info!(
                "iter {done}: train loss {train_loss:.4}, val loss {:.4}, val top-1 {:.3}, lr {lr}",
                val.loss,
                val.top1
            );
            (win_loss, win_wrong, win_n) = (0.0, 0.0, 0);
            if let Trigger::Auto { window, min_gap } = cfg.stochastic.trigger {
                let streak = detector.observe(train_loss, val.loss);
                if cfg.stochastic.enabled && !gates_on && streak >= window && done >= min_gap {
                    gates_on = true;
                    history.gates_enabled_at = Some(done);
                    set_eval_scales(&mut model, true);
                    log::info!("overfitting detected at iteration {done}; stochastic paths on");
                }
            }
        }
        if done < cfg.hp.total_iters && lr_at(done, &cfg.hp) != lr {
            checkpoint(&model, cfg.checkpoint_dir.as_deref(), &format!("iter-{done}"))?;
        }
    }
    if cfg.hp.total_iters > 0 {
        checkpoint(&model, cfg.checkpoint_dir.as_deref(), "final")?;
    }
    history.wall_ms = start.elapsed().as_millis() as u64;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmsprop_hand_step() {
        let mut p = ParamStore::<f64>::new();
        p.insert("k", "w", Tensor::from_f64(&[1], &[1.0]).unwrap(), true);
        let mut g = ParamStore::<f64>::new();
        g.insert("k", "w", Tensor::from_f64(&[1], &[2.0]).unwrap(), true);
        let mut s = RmsPropState::new(&p);
        let hp = OptimizerHP { decay: 0.9, epsilon: 1.0, ..OptimizerHP::large_scale() };
        rmsprop_step(&mut p, &g, &mut s, &hp, 0.1).unwrap();
        let sq = s.sq.get("k", "w").unwrap().data()[0];
        assert!((sq - 0.4).abs() < 1e-15);
        let want = 1.0 - 0.1 * 2.0 / 1.4f64.sqrt();
        assert!((p.get("k", "w").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn schedule_anchors() {
        let hp = OptimizerHP::large_scale();
        assert_eq!(lr_at(0, &hp), 0.45);
        assert_eq!(lr_at(159_999, &hp), 0.45);
        assert_eq!(lr_at(160_000, &hp), 0.045);
        assert_eq!(lr_at(320_000, &hp), 0.0045);
        assert_eq!(lr_at(480_000, &hp), 0.00045);
        assert_eq!(lr_at(559_999, &hp), 0.00045);
    }

    #[test]
    fn desk_schedule_decays_three_times() {
        for total in [100, 2000, 3500, 7] {
            let hp = OptimizerHP::desk(total);
            let decays = (1..total).filter(|&i| lr_at(i, &hp) != lr_at(i - 1, &hp)).count();
            assert_eq!(decays, 3, "total {total}");
        }
    }

    #[test]
    fn linear_probabilities() {
        assert_eq!(gate_probabilities(5, 0.25), [0.0, 0.0625, 0.125, 0.1875, 0.25]);
        assert_eq!(gate_probabilities(1, 0.25), [0.0]);
        assert_eq!(gate_probabilities(2, 0.25), [0.0, 0.25]);
    }

    #[test]
    fn detector_needs_consecutive_rises() {
        let mut d = OverfitDetector::default();
        assert_eq!(d.observe(1.0, 1.0), 0);
        assert_eq!(d.observe(0.9, 1.1), 1);
        assert_eq!(d.observe(0.8, 1.2), 2);
        assert_eq!(d.observe(0.7, 1.1), 0);
    }
}
