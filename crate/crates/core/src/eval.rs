//! Top-k error and multi-crop evaluation with top-fraction pooling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::Model;
use crate::data::{crop, flip_horizontal, resize_bilinear, CropBox, Dataset};
use crate::tensor::{forward, softmax_cross_entropy, softmax_rows, EngineError, Mode, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no crop scores to pool")]
    Empty,
    #[error("pooling fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("no usable scale: every crop is larger than its scaled image")]
    NoScale,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Number of crops pooled: `max(1, ceil(fraction · crops))`. The product is
/// nudged down by 1e-9 first so that e.g. 0.3 · 10 counts as exactly 3.
pub fn pool_count(crops: usize, fraction: f64) -> usize {
    ((fraction * crops as f64 - 1e-9).ceil() as usize).clamp(1, crops)
}

/// Per class, the mean of the `pool_count` highest crop scores.
/// `scores[crop][class]`.
pub fn topk_pool(scores: &[Vec<f64>], fraction: f64) -> Result<Vec<f64>, EvalError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::BadFraction(fraction));
    }
    let classes = scores.first().map_or(0, Vec::len);
    if classes == 0 {
        return Err(EvalError::Empty);
    }
    let k = pool_count(scores.len(), fraction);
    Ok((0..classes)
        .map(|c| {
            let mut col: Vec<f64> = scores.iter().map(|row| row[c]).collect();
            col.sort_by(|a, b| b.total_cmp(a));
            col[..k].iter().sum::<f64>() / k as f64
        })
        .collect())
}

/// Whether `label` is among the `k` best scores, ties going to the lower
/// class index.
pub fn in_top_k(scores: &[f64], label: usize, k: usize) -> bool {
    let s = scores[label];
    let rank = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < label))
        .count();
    rank < k
}

/// Fraction of rows whose label is not among the `k` highest scores.
pub fn topk_error(scores: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = scores.iter().zip(labels).filter(|(s, &l)| !in_top_k(s, l, k)).count();
    wrong as f64 / labels.len() as f64
}

fn rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let k = logits.shape()[1];
    logits.to_f64_vec().chunks(k).map(<[f64]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub n: usize,
}

/// Single-crop evaluation-mode metrics over `indices`. Top-5 uses
/// `min(5, classes)`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Metrics, EvalError> {
    let (mut loss, mut wrong1, mut wrong5) = (0.0, 0.0, 0.0);
    let k5 = 5.min(ds.classes);
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = ds.batch::<T>(chunk);
        let (logits, _) = forward(&model.graph, &model.params, &x, Mode::Eval)?;
        let (l, _) = softmax_cross_entropy(&logits, &labels)?;
        let r = rows(&logits);
        let n = chunk.len() as f64;
        loss += l * n;
        wrong1 += topk_error(&r, &labels, 1) * n;
        wrong5 += topk_error(&r, &labels, k5) * n;
    }
    let n = indices.len().max(1) as f64;
    Ok(Metrics { loss: loss / n, top1: wrong1 / n, top5: wrong5 / n, n: indices.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    /// Image side multipliers relative to the model input size.
    pub scales: Vec<f64>,
    pub crops_per_scale: usize,
    pub top_fraction: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig { scales: vec![1.0, 1.25, 1.5], crops_per_scale: 8, top_fraction: 0.3 }
    }
}

impl PoolingConfig {
    pub fn single() -> Self {
        PoolingConfig { scales: vec![1.0], crops_per_scale: 1, top_fraction: 1.0 }
    }
}

/// Distinct crop offsets over a `[0, max_y] × [0, max_x]` offset range: the
/// centre, the four corners, then odd grids of increasing density.
fn grid_offsets(max_y: usize, max_x: usize, want: usize) -> Vec<(usize, usize)> {
    let mut out = vec![(max_y / 2, max_x / 2)];
    let push = |out: &mut Vec<(usize, usize)>, p: (usize, usize)| {
        if !out.contains(&p) {
            out.push(p);
        }
    };
    for p in [(0, 0), (0, max_x), (max_y, 0), (max_y, max_x)] {
        push(&mut out, p);
    }
    let mut g = 3;
    while out.len() < want && g <= 2 * (max_y.max(max_x) + 1) + 1 {
        for i in 0..g {
            for j in 0..g {
                let y = (i * max_y + (g - 1) / 2) / (g - 1);
                let x = (j * max_x + (g - 1) / 2) / (g - 1);
                push(&mut out, (y, x));
            }
        }
        g += 2;
    }
    out
}

/// Crop boxes (and whether each is mirrored) for one scaled image: the first
/// `ceil(crops / 2)` grid positions, then mirrored copies of them filling up
/// to `crops`. Positions repeat when the image has too few.
pub fn crop_plan(scaled: usize, crop: usize, crops: usize) -> Vec<(CropBox, bool)> {
    let unique = crops - crops / 2;
    let max = scaled - crop;
    let offsets = grid_offsets(max, max, unique);
    let boxes: Vec<CropBox> = (0..unique)
        .map(|i| {
            let (top, left) = offsets[i % offsets.len()];
            CropBox { top, left, height: crop, width: crop }
        })
        .collect();
    let mut plan: Vec<(CropBox, bool)> = boxes.iter().map(|&b| (b, false)).collect();
    plan.extend(boxes.iter().take(crops - unique).map(|&b| (b, true)));
    plan
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulticropResult {
    pub top1: f64,
    pub top5: f64,
    pub n_images: usize,
    /// Scales dropped because the crop did not fit.
    pub skipped_scales: Vec<f64>,
}

/// Per image and scale: resize, score every planned crop (softmax
/// probabilities), pool the top fraction per class; then average the pooled
/// vectors over scales and rank against the label.
pub fn multicrop_eval<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    indices: &[usize],
    cfg: &PoolingConfig,
) -> Result<MulticropResult, EvalError> {
    let input = model.meta.config.input_size;
    let mut scales = Vec::new();
    let mut skipped = Vec::new();
    for &s in &cfg.scales {
        let side = (s * input as f64).round() as usize;
        if side < input || s <= 0.0 {
            log::warn!("scale {s}: scaled image of side {side} is smaller than the {input}-pixel crop, skipping");
            skipped.push(s);
        } else {
            scales.push(side);
        }
    }
    if scales.is_empty() {
        return Err(EvalError::NoScale);
    }
    let k5 = 5.min(ds.classes);
    let mut pooled_all = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let img: Tensor<T> = ds.images[i].cast();
        let mut acc = vec![0.0; ds.classes];
        for &side in &scales {
            let scaled = resize_bilinear(&img, side, side);
            let crops: Vec<Tensor<T>> = crop_plan(side, input, cfg.crops_per_scale)
                .iter()
                .map(|(b, mirror)| {
                    let c = crop(&scaled, b);
                    if *mirror {
                        flip_horizontal(&c)
                    } else {
                        c
                    }
                })
                .collect();
            let batch = Tensor::stack(&crops)?;
            let (logits, _) = forward(&model.graph, &model.params, &batch, Mode::Eval)?;
            let pooled = topk_pool(&softmax_rows(&logits), cfg.top_fraction)?;
            for (a, p) in acc.iter_mut().zip(pooled) {
                *a += p;
            }
        }
        pooled_all.push(acc.iter().map(|a| a / scales.len() as f64).collect::<Vec<f64>>());
        labels.push(ds.labels[i]);
    }
    Ok(MulticropResult {
        top1: topk_error(&pooled_all, &labels, 1),
        top5: topk_error(&pooled_all, &labels, k5),
        n_images: indices.len(),
        skipped_scales: skipped,
    })
}
