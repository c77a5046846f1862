//! Growing a trained model: swapping module kinds and interleaving new units.
//!
//! Both operations lower the target configuration from scratch and then copy
//! every retained tensor from the source. Blocks are matched by module
//! position and block letter, everything else by share key.

use crate::algebra::ModuleKind;
use crate::dsl::NetworkConfig;
use crate::tensor::{ParamStore, Scalar, Tensor};

use super::{lower_with, BuildError, Model, ModuleInfo};

fn block_groups(m: &ModuleInfo) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for p in &m.paths {
        for b in p.applied() {
            if !out.iter().any(|(l, _)| *l == b.share_key) {
                out.push((b.share_key.clone(), m.block_key(&b.share_key)));
            }
        }
    }
    out
}

fn is_block_key<T>(model: &Model<T>, key: &str) -> bool {
    model.modules.iter().any(|m| key.starts_with(&format!("{}.", m.prefix)))
}

fn copy_group<T: Scalar>(dst: &mut ParamStore<T>, dst_key: &str, src: &ParamStore<T>, src_key: &str) {
    if let Some(g) = src.group(src_key) {
        dst.set_group(dst_key, g.clone());
    }
}

fn zero_final_layer<T: Scalar>(params: &mut ParamStore<T>, key: &str, layer: &str) {
    for suffix in ["w", "b"] {
        if let Some(t) = params.get_mut(key, &format!("{layer}.{suffix}")) {
            *t = Tensor::zeros(t.shape());
        }
    }
}

/// Copies stem, transitions and head, which keep their share keys.
fn copy_shared<T: Scalar>(target: &mut Model<T>, source: &Model<T>) {
    let keys: Vec<String> = target.params.share_keys().map(str::to_string).collect();
    for key in keys {
        if !is_block_key(target, &key) {
            copy_group(&mut target.params, &key, &source.params, &key);
        }
    }
}

/// Copies blocks of `src` into `dst` by letter; returns the letters that had
/// no counterpart (freshly initialized).
fn copy_module<T: Scalar>(target: &mut Model<T>, dst: &ModuleInfo, source: &Model<T>, src: &ModuleInfo) -> Vec<String> {
    let have: Vec<(String, String)> = block_groups(src);
    let mut fresh = Vec::new();
    for (letter, dst_key) in block_groups(dst) {
        match have.iter().find(|(l, _)| *l == letter) {
            Some((_, src_key)) => copy_group(&mut target.params, &dst_key, &source.params, src_key),
            None => fresh.push(dst_key),
        }
    }
    fresh
}

fn same_structure(a: &NetworkConfig, b: &NetworkConfig) -> Result<(), BuildError> {
    if a.stages.len() != b.stages.len() {
        return Err(BuildError::Mismatch(format!("{} stages vs {}", a.stages.len(), b.stages.len())));
    }
    for (x, y) in a.stages.iter().zip(&b.stages) {
        if x.name != y.name || x.modules.len() != y.modules.len() {
            return Err(BuildError::Mismatch(format!(
                "stage {} has {} modules, target stage {} has {}",
                x.name,
                x.modules.len(),
                y.name,
                y.modules.len()
            )));
        }
    }
    Ok(())
}

/// Replaces module kinds position by position. Blocks whose letter exists in
/// the source module are copied bitwise (for `poly-k`, the shared block takes
/// the source `F`); the others are freshly initialized from `seed`, or get a
/// zero final layer with `zero_last` so the new paths start at zero.
///
/// `zero_last` is rejected when a position becomes `poly-k` (k ≥ 2) from
/// another kind: its new paths reuse the copied block, which cannot be zeroed.
pub fn upgrade<T: Scalar>(
    model: &Model<T>,
    target: &NetworkConfig,
    zero_last: bool,
    seed: u64,
) -> Result<Model<T>, BuildError> {
    let meta = &model.meta;
    let target = target
        .clone()
        .with_input_size(meta.config.input_size)
        .with_classes(meta.config.classes)
        .with_base_width(meta.arch.base_width());
    same_structure(&meta.config, &target)?;
    if zero_last {
        for ((s, i, from), (_, _, to)) in meta.config.modules().zip(target.modules()) {
            if from != to && matches!(to, ModuleKind::Poly(k) if k >= 2) {
                return Err(BuildError::Mismatch(format!(
                    "zero_last cannot apply to {from} -> {to} at {}.{i}: the new paths reuse the copied block",
                    meta.config.stages[s].name
                )));
            }
        }
    }
    let mut out = lower_with::<T>(&target, &meta.arch, meta.beta, seed, meta.lowering)?;
    copy_shared(&mut out, model);
    let modules = out.modules.clone();
    for (dst, src) in modules.iter().zip(&model.modules) {
        let fresh = copy_module(&mut out, dst, model, src);
        if zero_last {
            let last = *meta.arch.layers().last().unwrap();
            for key in fresh {
                zero_final_layer(&mut out.params, &key, last);
            }
        }
    }
    out.meta.seed = meta.seed;
    out.meta.iteration = meta.iteration;
    Ok(out)
}

/// Gap (after original unit `g`) receiving each of `new` units in a stage of
/// `existing` units: `floor(i · existing / new)`, which spreads insertions as
/// evenly as possible and favours earlier gaps on ties. With more new units
/// than gaps, gaps take several units in turn.
pub fn interleave_positions(existing: usize, new: usize) -> Vec<usize> {
    (0..new).map(|i| i * existing / new).collect()
}

/// Inserts `per_stage_new[s]` units into stage `s` between the originals.
/// Each new unit copies the kind of the original before it; originals keep
/// their parameters bitwise.
pub fn deepen_interleave<T: Scalar>(
    model: &Model<T>,
    per_stage_new: &[usize],
    zero_last: bool,
    seed: u64,
) -> Result<Model<T>, BuildError> {
    let meta = &model.meta;
    if per_stage_new.len() != meta.config.stages.len() {
        return Err(BuildError::Mismatch(format!(
            "{} insertion counts for {} stages",
            per_stage_new.len(),
            meta.config.stages.len()
        )));
    }
    let mut target = meta.config.clone();
    // source position of every target module, None for inserted units
    let mut origin: Vec<Option<usize>> = Vec::new();
    let mut base = 0;
    for (stage, &n) in target.stages.iter_mut().zip(per_stage_new) {
        let gaps = interleave_positions(stage.modules.len(), n);
        let mut kinds = Vec::new();
        for (i, &kind) in stage.modules.iter().enumerate() {
            kinds.push(kind);
            origin.push(Some(base + i));
            for _ in gaps.iter().filter(|&&g| g == i) {
                kinds.push(kind);
                origin.push(None);
            }
        }
        base += stage.modules.len();
        stage.modules = kinds;
    }
    target.validate()?;
    let mut out = lower_with::<T>(&target, &meta.arch, meta.beta, seed, meta.lowering)?;
    copy_shared(&mut out, model);
    let modules = out.modules.clone();
    let last = *meta.arch.layers().last().unwrap();
    for (dst, from) in modules.iter().zip(&origin) {
        match from {
            Some(s) => {
                copy_module(&mut out, dst, model, &model.modules[*s]);
            }
            None if zero_last => {
                for key in dst.block_keys() {
                    zero_final_layer(&mut out.params, &key, last);
                }
            }
            None => {}
        }
    }
    out.meta.seed = meta.seed;
    out.meta.iteration = meta.iteration;
    Ok(out)
}
