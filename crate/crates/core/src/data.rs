//! Synthetic striped-image dataset and random-resized-crop augmentation.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{read_tensor, write_tensor, EngineError, Scalar, Tensor};

/// Channels of every generated image.
pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least 2 classes and images of at least 8 pixels (got {classes} classes, size {size})")]
    BadShape { classes: usize, size: usize },
    #[error("dataset file '{0}': expected <label>_<index>.tns")]
    BadName(String),
    #[error("dataset file '{name}': {msg}")]
    BadImage { name: String, msg: String },
    #[error("no images found in {0}")]
    Empty(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Split of sample `index`: one in ten indices (by hash) is held out.
pub fn split_of(index: usize) -> Split {
    if rng::substream(0, &format!("split/{index}")) % 10 == 0 {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[C, size, size]` images.
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Stacks the given samples into a `[N, C, H, W]` batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let images: Vec<Tensor<T>> = indices.iter().map(|&i| self.images[i].cast()).collect();
        (Tensor::stack(&images).expect("equal image shapes"), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Class histogram.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Pattern amplitude and per-pixel noise deviation.
const SIGNAL: f64 = 1.0;
const NOISE: f64 = 2.5;
/// Per-image phase jitter of the stripes, radians either way.
const PHASE_JITTER: f64 = 1.2;

struct ClassPattern {
    angle: f64,
    cycles: f64,
    phase: f64,
    gains: [f64; CHANNELS],
}

fn class_patterns(classes: usize, seed: u64) -> Vec<ClassPattern> {
    let mut r = rng::stream(seed, "data/classes");
    (0..classes)
        .map(|k| {
            // orientations stay within a quarter turn so a horizontal flip
            // never maps one class onto another
            let angle = 0.5 * PI * k as f64 / (classes - 1) as f64;
            let cycles = 2.0 + (k % 3) as f64;
            let phase = r.gen_range(0.0..2.0 * PI);
            let gains = [r.gen_range(0.5..1.0), r.gen_range(0.5..1.0), r.gen_range(0.5..1.0)];
            ClassPattern { angle, cycles, phase, gains }
        })
        .collect()
}

/// `n` images of `classes` stripe patterns (orientation, frequency and colour
/// gains per class) with phase jitter and Gaussian noise. Labels cycle
/// through the classes, so counts are balanced within one.
pub fn synth_dataset(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset, DataError> {
    if classes < 2 || size < 8 {
        return Err(DataError::BadShape { classes, size });
    }
    let patterns = class_patterns(classes, seed);
    let noise = Normal::new(0.0, NOISE).expect("finite");
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let p = &patterns[label];
        let mut r = rng::stream(seed, &format!("data/sample/{i}"));
        let phase = p.phase + r.gen_range(-PHASE_JITTER..PHASE_JITTER);
        let (c, s) = (p.angle.cos(), p.angle.sin());
        let k = 2.0 * PI * p.cycles / size as f64;
        let mut data = Vec::with_capacity(CHANNELS * size * size);
        for gain in p.gains {
            for y in 0..size {
                for x in 0..size {
                    let t = k * (x as f64 * c + y as f64 * s) + phase;
                    data.push((SIGNAL * gain * t.sin() + noise.sample(&mut r)) as f32);
                }
            }
        }
        images.push(Tensor::new(vec![CHANNELS, size, size], data)?);
        labels.push(label);
        splits.push(split_of(i));
    }
    Ok(Dataset { images, labels, splits, classes, size, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the source area.
    pub area_min: f64,
    pub area_max: f64,
    /// Width over height.
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub out_size: usize,
    pub flip_prob: f64,
    pub max_attempts: usize,
}

impl AugmentConfig {
    /// Crop area 8%–100%, aspect 3/4–4/3, flip half of the time, at the
    /// given output size.
    pub fn standard(out_size: usize) -> Self {
        AugmentConfig {
            area_min: 0.08,
            area_max: 1.0,
            aspect_min: 3.0 / 4.0,
            aspect_max: 4.0 / 3.0,
            out_size,
            flip_prob: 0.5,
            max_attempts: 10,
        }
    }

    /// Whole image, no flip: augmentation reduces to a resize.
    pub fn identity(out_size: usize) -> Self {
        AugmentConfig {
            area_min: 1.0,
            area_max: 1.0,
            aspect_min: 1.0,
            aspect_max: 1.0,
            out_size,
            flip_prob: 0.0,
            max_attempts: 10,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = self.area_min > 0.0
            && self.area_min <= self.area_max
            && self.area_max <= 1.0
            && self.aspect_min > 0.0
            && self.aspect_min <= self.aspect_max
            && (0.0..=1.0).contains(&self.flip_prob)
            && self.out_size > 0;
        if ok {
            Ok(())
        } else {
            Err(format!("invalid augmentation settings {self:?}"))
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig::standard(32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn area_fraction(&self, h: usize, w: usize) -> f64 {
        (self.height * self.width) as f64 / (h * w) as f64
    }

    pub fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }
}

/// Draws a crop of an `h × w` image. Candidates are rounded to whole pixels
/// and rejected unless they fit and still satisfy the area and aspect
/// bounds; after `max_attempts` failures the centred maximal square is used.
pub fn sample_crop(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> CropBox {
    let total = (h * w) as f64;
    for _ in 0..cfg.max_attempts {
        let area = total * sample_range(rng, cfg.area_min, cfg.area_max);
        let aspect = sample_range(rng, cfg.aspect_min, cfg.aspect_max);
        let cw = ((area * aspect).sqrt().round() as usize).max(1);
        let ch = ((area / aspect).sqrt().round() as usize).max(1);
        if cw > w || ch > h {
            continue;
        }
        let b = CropBox { top: 0, left: 0, height: ch, width: cw };
        let (frac, asp) = (b.area_fraction(h, w), b.aspect());
        if frac < cfg.area_min || frac > cfg.area_max || asp < cfg.aspect_min || asp > cfg.aspect_max {
            continue;
        }
        let top = rng.gen_range(0..=h - ch);
        let left = rng.gen_range(0..=w - cw);
        return CropBox { top, left, ..b };
    }
    let side = h.min(w);
    CropBox { top: (h - side) / 2, left: (w - side) / 2, height: side, width: side }
}

fn sample_range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Cuts `b` out of a `[C, H, W]` image.
pub fn crop<T: Scalar>(image: &Tensor<T>, b: &CropBox) -> Tensor<T> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    assert!(b.top + b.height <= h && b.left + b.width <= w, "crop outside image");
    let mut data = Vec::with_capacity(c * b.height * b.width);
    for ch in 0..c {
        for y in b.top..b.top + b.height {
            let row = (ch * h + y) * w;
            data.extend_from_slice(&image.data()[row + b.left..row + b.left + b.width]);
        }
    }
    Tensor::new(vec![c, b.height, b.width], data).expect("crop shape")
}

/// Source coordinate and interpolation weight for each output position
/// (half-pixel centres, edges clamped).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a `[C, H, W]` image. Same-size resizes are exact
/// copies and constant images stay exactly constant.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h == out_h && w == out_w {
        return image.clone();
    }
    let ys = bilinear_taps(h, out_h);
    let xs = bilinear_taps(w, out_w);
    let lerp = |a: T, b: T, t: f64| if a == b { a } else { a + (b - a) * T::cast(t) };
    let src = image.data();
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
                data.push(lerp(top, bottom, ty));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], data).expect("resize shape")
}

/// Mirrors a `[C, H, W]` image left to right.
pub fn flip_horizontal<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let w = image.shape()[2];
    let mut data = image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}

/// Random crop, bilinear resize to `out_size`, random horizontal flip.
pub fn augment<T: Scalar>(image: &Tensor<T>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Tensor<T> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let b = sample_crop(h, w, cfg, rng);
    let mut out = resize_bilinear(&crop(image, &b), cfg.out_size, cfg.out_size);
    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
        out = flip_horizontal(&out);
    }
    out
}

/// Writes every image as `<label>_<index>.tns`.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    for (i, (img, &label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let f = fs::File::create(dir.join(format!("{label}_{i}.tns")))?;
        write_tensor(std::io::BufWriter::new(f), img)?;
    }
    Ok(())
}

/// Reads `<label>_<index>.tns` files, ordered by index. The class count is
/// one more than the largest label; splits follow the index hash.
pub fn import_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let mut entries: Vec<(usize, usize, Tensor<f32>)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let Some(stem) = name.strip_suffix(".tns") else { continue };
        let (label, index) = stem
            .split_once('_')
            .and_then(|(l, i)| Some((l.parse::<usize>().ok()?, i.parse::<usize>().ok()?)))
            .ok_or_else(|| DataError::BadName(name.clone()))?;
        let img: Tensor<f32> = read_tensor(std::io::BufReader::new(fs::File::open(&path)?))?;
        if img.rank() != 3 || img.shape()[1] != img.shape()[2] {
            return Err(DataError::BadImage { name, msg: format!("shape {:?} is not [C, S, S]", img.shape()) });
        }
        entries.push((index, label, img));
    }
    if entries.is_empty() {
        return Err(DataError::Empty(dir.display().to_string()));
    }
    entries.sort_by_key(|e| e.0);
    let size = entries[0].2.shape()[1];
    if let Some(e) = entries.iter().find(|e| e.2.shape() != entries[0].2.shape()) {
        return Err(DataError::BadImage { name: format!("{}_{}.tns", e.1, e.0), msg: "shape differs".into() });
    }
    let classes = entries.iter().map(|e| e.1).max().unwrap() + 1;
    Ok(Dataset {
        splits: entries.iter().map(|e| split_of(e.0)).collect(),
        labels: entries.iter().map(|e| e.1).collect(),
        images: entries.into_iter().map(|e| e.2).collect(),
        classes,
        size,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = synth_dataset(100, 4, 16, 3).unwrap();
        assert_eq!(a.class_counts(), [25, 25, 25, 25]);
        assert_eq!(a, synth_dataset(100, 4, 16, 3).unwrap());
        assert_ne!(a.images, synth_dataset(100, 4, 16, 4).unwrap().images);
        assert!(synth_dataset(10, 1, 16, 0).is_err());
        assert!(synth_dataset(10, 2, 4, 0).is_err());
    }

    #[test]
    fn constant_resize_is_constant() {
        let img = Tensor::<f32>::full(&[2, 7, 5], 0.3);
        let out = resize_bilinear(&img, 11, 4);
        assert!(out.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn bilinear_midpoint() {
        let img = Tensor::<f64>::from_f64(&[1, 1, 2], &[0.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 1, 4);
        assert_eq!(out.data(), [0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn fallback_is_centre_square() {
        let cfg = AugmentConfig { area_min: 1.0, area_max: 1.0, aspect_min: 2.0, aspect_max: 2.0, ..AugmentConfig::standard(8) };
        let b = sample_crop(10, 6, &cfg, &mut rng::stream(0, "t"));
        assert_eq!(b, CropBox { top: 2, left: 0, height: 6, width: 6 });
    }
}
