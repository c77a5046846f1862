//! Checkpoint directories: `manifest.json` plus `params.bin`.
//!
//! The manifest holds everything needed to re-lower the graph; `params.bin`
//! is a list of `(share key, name, trainable, tensor)` records, each tensor
//! in the binary tensor format.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsl::parse_network;
use crate::tensor::{read_tensor, write_tensor, Precision, ParamStore, Scalar};

use super::{lower_with, BlockArch, BuildError, Lowering, Model};

const PARAMS_MAGIC: &[u8; 4] = b"PNP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Canonical architecture string.
    pub config: String,
    pub input_size: usize,
    pub classes: usize,
    /// Block descriptor such as `dense:4,8`.
    pub arch: String,
    pub beta: f64,
    pub seed: u64,
    pub iteration: u64,
    pub lowering: Lowering,
    pub precision: Precision,
    pub eval_scales: Vec<f64>,
}

impl CheckpointManifest {
    pub fn of<T: Scalar>(model: &Model<T>) -> Self {
        let m = &model.meta;
        CheckpointManifest {
            config: m.config.to_string(),
            input_size: m.config.input_size,
            classes: m.config.classes,
            arch: m.arch.to_string(),
            beta: m.beta,
            seed: m.seed,
            iteration: m.iteration,
            lowering: m.lowering,
            precision: T::PRECISION,
            eval_scales: model.eval_scales(),
        }
    }

    pub fn read(dir: &Path) -> Result<Self, BuildError> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| BuildError::Checkpoint(format!("manifest.json: {e}")))
    }
}

fn write_str(out: &mut impl Write, s: &str) -> std::io::Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String, BuildError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 16 {
        return Err(BuildError::Checkpoint(format!("name of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| BuildError::Checkpoint("name is not UTF-8".into()))
}

pub fn write_params<T: Scalar>(path: &Path, params: &ParamStore<T>) -> Result<(), BuildError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(PARAMS_MAGIC)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (key, name, p) in params.iter() {
        write_str(&mut out, key)?;
        write_str(&mut out, name)?;
        out.write_all(&[p.trainable as u8])?;
        write_tensor(&mut out, &p.value)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_params<T: Scalar>(path: &Path) -> Result<ParamStore<T>, BuildError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PARAMS_MAGIC {
        return Err(BuildError::Checkpoint("params.bin: bad magic".into()));
    }
    let mut n = [0u8; 4];
    r.read_exact(&mut n)?;
    let mut params = ParamStore::new();
    for _ in 0..u32::from_le_bytes(n) {
        let key = read_str(&mut r)?;
        let name = read_str(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let value = read_tensor(&mut r)?;
        params.insert(&key, &name, value, flag[0] != 0);
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<(), BuildError> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_string_pretty(&CheckpointManifest::of(model))
        .map_err(|e| BuildError::Checkpoint(e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest)?;
    write_params(&dir.join("params.bin"), &model.params)
}

/// Rebuilds the graph from the manifest and installs the stored parameters,
/// converting precision if needed.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Model<T>, BuildError> {
    let man = CheckpointManifest::read(dir)?;
    let arch: BlockArch = man.arch.parse()?;
    let config = parse_network(&man.config)?.with_input_size(man.input_size).with_classes(man.classes);
    let mut model = lower_with::<T>(&config, &arch, man.beta, man.seed, man.lowering)?;
    let stored: ParamStore<T> = read_params(&dir.join("params.bin"))?;
    for (key, name, p) in model.params.iter() {
        match stored.get(key, name) {
            Some(t) if t.shape() == p.value.shape() => {}
            Some(t) => {
                return Err(BuildError::Checkpoint(format!(
                    "{key}/{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )))
            }
            None => return Err(BuildError::Checkpoint(format!("{key}/{name} missing from params.bin"))),
        }
    }
    if stored.len() != model.params.len() {
        return Err(BuildError::Checkpoint(format!(
            "params.bin holds {} tensors, model has {}",
            stored.len(),
            model.params.len()
        )));
    }
    model.params = stored;
    if man.eval_scales.len() == model.modules.len() {
        model.set_eval_scales(&man.eval_scales);
    }
    model.meta.iteration = man.iteration;
    Ok(model)
}
