//! Lowering network configurations into executable models.
//!
//! A model is a static graph plus a parameter store. Residual modules are
//! lowered from their operator expression: every path gets its own gate node,
//! and in the cascaded lowering every distinct prefix of blocks is evaluated
//! once and reused by all paths that start with it.

mod checkpoint;
mod surgery;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use surgery::{deepen_interleave, interleave_positions, upgrade};

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algebra::{cascade, expand_module, module_form, AlgebraError, ModuleKind, Monomial};
use crate::dsl::{DslError, NetworkConfig};
use crate::rng;
use crate::tensor::{EngineError, Graph, NodeId, Op, ParamRef, ParamStore, Scalar, Tensor};

/// Channels of the input images.
pub const IN_CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("bad block architecture: {0}")]
    BadArch(String),
    #[error("structural mismatch: {0}")]
    Mismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The residual block `F` every module is built from. Widths are those of the
/// first stage; each later stage doubles them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockArch {
    /// `x -> W2 relu(W1 x + b1) + b2` on feature vectors.
    Dense { dim: usize, hidden: usize },
    /// 1x1 `C -> C/r`, relu, 3x3 `C/r -> C/r`, relu, 1x1 `C/r -> C`.
    Conv { channels: usize, reduction: usize },
}

impl BlockArch {
    pub fn base_width(&self) -> usize {
        match *self {
            BlockArch::Dense { dim, .. } => dim,
            BlockArch::Conv { channels, .. } => channels,
        }
    }

    /// The block as used in stage `stage`.
    pub fn at_stage(&self, stage: usize) -> BlockArch {
        match *self {
            BlockArch::Dense { dim, hidden } => BlockArch::Dense { dim: dim << stage, hidden: hidden << stage },
            BlockArch::Conv { channels, reduction } => BlockArch::Conv { channels: channels << stage, reduction },
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, BlockArch::Conv { .. })
    }

    fn check(&self) -> Result<(), BuildError> {
        match *self {
            BlockArch::Dense { dim, hidden } if dim == 0 || hidden == 0 => {
                Err(BuildError::BadArch(format!("{self}: widths must be positive")))
            }
            BlockArch::Conv { channels, reduction }
                if channels == 0 || reduction == 0 || channels % reduction != 0 =>
            {
                Err(BuildError::BadArch(format!("{self}: channels must be a positive multiple of the reduction")))
            }
            _ => Ok(()),
        }
    }

    /// Layer names of the block; the last one is the final linear layer.
    pub fn layers(&self) -> &'static [&'static str] {
        match self {
            BlockArch::Dense { .. } => &["l1", "l2"],
            BlockArch::Conv { .. } => &["l1", "l2", "l3"],
        }
    }

    /// Trainable scalars in one block.
    pub fn block_params(&self) -> usize {
        match *self {
            BlockArch::Dense { dim, hidden } => dim * hidden + hidden + hidden * dim + dim,
            BlockArch::Conv { channels: c, reduction } => {
                let m = c / reduction;
                c * m + m + 9 * m * m + m + m * c + c
            }
        }
    }
}

impl fmt::Display for BlockArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockArch::Dense { dim, hidden } => write!(f, "dense:{dim},{hidden}"),
            BlockArch::Conv { channels, reduction } => write!(f, "conv:{channels},{reduction}"),
        }
    }
}

impl FromStr for BlockArch {
    type Err = BuildError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BuildError::BadArch(format!("'{s}' (expected dense:DIM,HIDDEN or conv:CHANNELS,REDUCTION)"));
        let (kind, rest) = s.trim().split_once(':').ok_or_else(bad)?;
        let (a, b) = rest.split_once(',').ok_or_else(bad)?;
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        let arch = match kind.trim() {
            "dense" => BlockArch::Dense { dim: a, hidden: b },
            "conv" => BlockArch::Conv { channels: a, reduction: b },
            _ => return Err(bad()),
        };
        arch.check()?;
        Ok(arch)
    }
}

/// How module paths are turned into graph nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Lowering {
    /// Every path evaluates its blocks from scratch.
    Naive,
    /// Shared prefixes are evaluated once.
    #[default]
    Cascaded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleInfo {
    pub stage: usize,
    /// Position within its stage.
    pub index: usize,
    pub kind: ModuleKind,
    /// Share keys of this module's blocks are `"{prefix}.{letter}"`.
    pub prefix: String,
    pub input: NodeId,
    /// `x + β·Σ paths`, before the closing ReLU.
    pub pre_activation: NodeId,
    pub output: NodeId,
    /// Gate node of each path, in path order.
    pub gates: Vec<NodeId>,
    /// Output node of every block evaluation.
    pub block_apps: Vec<NodeId>,
    pub paths: Vec<Monomial>,
}

impl ModuleInfo {
    pub fn block_key(&self, letter: &str) -> String {
        format!("{}.{letter}", self.prefix)
    }

    /// Share keys of the module's distinct blocks, in first-use order.
    pub fn block_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = Vec::new();
        for p in &self.paths {
            for b in p.applied() {
                let k = self.block_key(&b.share_key);
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
        }
        keys
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SectionKind {
    Stem,
    Module(usize),
    Transition,
    Head,
}

/// A contiguous run of graph nodes belonging to one part of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub kind: SectionKind,
    pub stage: Option<usize>,
    pub nodes: Range<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: NetworkConfig,
    pub arch: BlockArch,
    pub beta: f64,
    pub seed: u64,
    pub iteration: u64,
    pub lowering: Lowering,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub graph: Graph,
    pub params: ParamStore<T>,
    pub modules: Vec<ModuleInfo>,
    pub sections: Vec<Section>,
    pub meta: ModelMeta,
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            graph: self.graph.clone(),
            params: self.params.cast(),
            modules: self.modules.clone(),
            sections: self.sections.clone(),
            meta: self.meta.clone(),
        }
    }

    /// Path count of every module, in network order.
    pub fn path_counts(&self) -> Vec<usize> {
        self.modules.iter().map(|m| m.gates.len()).collect()
    }

    /// Sets the factor each module's gates apply in evaluation mode.
    pub fn set_eval_scales(&mut self, scales: &[f64]) {
        assert_eq!(scales.len(), self.modules.len(), "one scale per module");
        for (m, &s) in self.modules.iter().zip(scales) {
            for &g in &m.gates {
                if let Op::Gate { eval_scale, .. } = &mut self.graph.nodes_mut()[g].op {
                    *eval_scale = s;
                }
            }
        }
    }

    pub fn eval_scales(&self) -> Vec<f64> {
        self.modules
            .iter()
            .map(|m| match m.gates.first().map(|&g| &self.graph.node(g).op) {
                Some(Op::Gate { eval_scale, .. }) => *eval_scale,
                _ => 1.0,
            })
            .collect()
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        self.graph.input_shape()
    }
}

/// One residual module lowered on its own, input and output being the block
/// shape. Used for equivalence and gradient checks.
#[derive(Clone, Debug)]
pub struct ModuleGraph<T> {
    pub graph: Graph,
    pub params: ParamStore<T>,
    pub info: ModuleInfo,
}

struct Builder<T> {
    graph: Graph,
    params: ParamStore<T>,
    seed: u64,
    modules: Vec<ModuleInfo>,
    sections: Vec<Section>,
}

fn he_tensor<T: Scalar>(rng: &mut impl rand::Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let n = shape.iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_f64(shape, &data).expect("shape matches")
}

impl<T: Scalar> Builder<T> {
    fn new(input_shape: &[usize], seed: u64) -> Self {
        Builder { graph: Graph::new(input_shape), params: ParamStore::new(), seed, modules: vec![], sections: vec![] }
    }

    /// He fan-in normal weights and zero bias for a layer; draws come from a
    /// stream keyed by share key and layer so they do not depend on build order.
    fn init_layer(&mut self, key: &str, layer: &str, w_shape: &[usize], fan_in: usize) {
        let mut r = rng::stream(self.seed, &format!("init/{key}/{layer}"));
        self.params.insert(key, &format!("{layer}.w"), he_tensor(&mut r, w_shape, fan_in), true);
        self.params.insert(key, &format!("{layer}.b"), Tensor::zeros(&[w_shape[0]]), true);
    }

    fn init_norm(&mut self, key: &str, layer: &str, channels: usize) {
        self.params.insert(key, &format!("{layer}.gamma"), Tensor::full(&[channels], T::one()), true);
        self.params.insert(key, &format!("{layer}.beta"), Tensor::zeros(&[channels]), true);
        self.params.insert(key, &format!("{layer}.running_mean"), Tensor::zeros(&[channels]), false);
        self.params.insert(key, &format!("{layer}.running_var"), Tensor::full(&[channels], T::one()), false);
    }

    fn dense(&mut self, x: NodeId, key: &str, layer: &str, inputs: usize, outputs: usize) -> NodeId {
        if self.params.get(key, &format!("{layer}.w")).is_none() {
            self.init_layer(key, layer, &[outputs, inputs], inputs);
        }
        self.graph.push(Op::Dense { param: ParamRef::new(key, layer), inputs, outputs }, &[x])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, x: NodeId, key: &str, layer: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> NodeId {
        if self.params.get(key, &format!("{layer}.w")).is_none() {
            self.init_layer(key, layer, &[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel);
        }
        self.graph.push(Op::Conv2d { param: ParamRef::new(key, layer), in_ch, out_ch, kernel, stride }, &[x])
    }

    fn norm_relu(&mut self, x: NodeId, key: &str, layer: &str, channels: usize) -> NodeId {
        if self.params.get(key, &format!("{layer}.gamma")).is_none() {
            self.init_norm(key, layer, channels);
        }
        let n = self.graph.push(Op::ChannelNorm { param: ParamRef::new(key, layer), channels }, &[x]);
        self.graph.push(Op::Relu, &[n])
    }

    fn block(&mut self, x: NodeId, key: &str, arch: &BlockArch) -> NodeId {
        match *arch {
            BlockArch::Dense { dim, hidden } => {
                let h = self.dense(x, key, "l1", dim, hidden);
                let h = self.graph.push(Op::Relu, &[h]);
                self.dense(h, key, "l2", hidden, dim)
            }
            BlockArch::Conv { channels, reduction } => {
                let m = channels / reduction;
                let h = self.conv(x, key, "l1", channels, m, 1, 1);
                let h = self.graph.push(Op::Relu, &[h]);
                let h = self.conv(h, key, "l2", m, m, 3, 1);
                let h = self.graph.push(Op::Relu, &[h]);
                self.conv(h, key, "l3", m, channels, 1, 1)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn module(
        &mut self,
        x: NodeId,
        kind: ModuleKind,
        arch: &BlockArch,
        beta: f64,
        lowering: Lowering,
        stage: usize,
        index: usize,
        prefix: &str,
    ) -> Result<ModuleInfo, BuildError> {
        let module_idx = self.modules.len();
        let naive = expand_module(kind, beta)?;
        let expr = match lowering {
            Lowering::Naive => naive,
            Lowering::Cascaded => cascade(&naive)?,
        };
        let form = module_form(&expr)?;
        let mut memo: HashMap<Vec<String>, NodeId> = HashMap::new();
        let mut block_apps = Vec::new();
        let mut gates = Vec::new();
        for (slot, path) in form.paths.iter().enumerate() {
            let mut cur = x;
            let mut applied: Vec<String> = Vec::new();
            for b in path.applied() {
                let key = format!("{prefix}.{}", b.share_key);
                applied.push(key.clone());
                if lowering == Lowering::Cascaded {
                    if let Some(&n) = memo.get(&applied) {
                        cur = n;
                        continue;
                    }
                }
                cur = self.block(cur, &key, arch);
                block_apps.push(cur);
                memo.insert(applied.clone(), cur);
            }
            gates.push(self.graph.push(Op::Gate { module: module_idx, slot, eval_scale: 1.0 }, &[cur]));
        }
        let sum = self.graph.push(Op::Add, &gates);
        let scaled = self.graph.push(Op::Scale(form.beta), &[sum]);
        let pre_activation = self.graph.push(Op::Add, &[x, scaled]);
        let output = self.graph.push(Op::Relu, &[pre_activation]);
        let info = ModuleInfo {
            stage,
            index,
            kind,
            prefix: prefix.to_string(),
            input: x,
            pre_activation,
            output,
            gates,
            block_apps,
            paths: form.paths,
        };
        self.modules.push(info.clone());
        Ok(info)
    }

    fn section(&mut self, kind: SectionKind, stage: Option<usize>, start: NodeId) {
        self.sections.push(Section { kind, stage, nodes: start..self.graph.len() });
    }
}

/// Lowers a configuration with the cascaded (memoized) module lowering.
pub fn lower<T: Scalar>(
    config: &NetworkConfig,
    arch: &BlockArch,
    beta: f64,
    seed: u64,
) -> Result<Model<T>, BuildError> {
    lower_with(config, arch, beta, seed, Lowering::Cascaded)
}

/// Builds stem, stage chains with stride-2 transitions, and the pooled
/// classifier head. Stage widths follow the block architecture: stage `i`
/// uses `arch.at_stage(i)`.
pub fn lower_with<T: Scalar>(
    config: &NetworkConfig,
    arch: &BlockArch,
    beta: f64,
    seed: u64,
    lowering: Lowering,
) -> Result<Model<T>, BuildError> {
    arch.check()?;
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(AlgebraError::BadBeta(beta).into());
    }
    let config = config.clone().with_base_width(arch.base_width());
    config.validate()?;
    let size = config.input_size;
    if arch.is_conv() && size >> config.stages.len() == 0 {
        return Err(BuildError::Mismatch(format!(
            "input size {size} too small for {} downsampling steps",
            config.stages.len()
        )));
    }
    let mut b = Builder::<T>::new(&[IN_CHANNELS, size, size], seed);
    let w0 = arch.base_width();

    let start = b.graph.len();
    let x = b.conv(Graph::INPUT, "stem", "conv1", IN_CHANNELS, w0, 3, 1);
    let x = b.norm_relu(x, "stem", "norm1", w0);
    let x = b.conv(x, "stem", "conv2", w0, w0, 3, 2);
    let mut x = b.norm_relu(x, "stem", "norm2", w0);
    if !arch.is_conv() {
        x = b.graph.push(Op::GlobalAvgPool, &[x]);
    }
    b.section(SectionKind::Stem, None, start);

    for (si, stage) in config.stages.iter().enumerate() {
        let sa = arch.at_stage(si);
        if si > 0 {
            let start = b.graph.len();
            let key = format!("trans.{}", stage.name);
            let (wi, wo) = (arch.at_stage(si - 1).base_width(), sa.base_width());
            x = if arch.is_conv() {
                b.conv(x, &key, "conv", wi, wo, 3, 2)
            } else {
                b.dense(x, &key, "fc", wi, wo)
            };
            x = b.norm_relu(x, &key, "norm", wo);
            b.section(SectionKind::Transition, Some(si), start);
        }
        for (mi, &kind) in stage.modules.iter().enumerate() {
            let start = b.graph.len();
            let prefix = format!("{}.{mi}", stage.name);
            let info = b.module(x, kind, &sa, beta, lowering, si, mi, &prefix)?;
            x = info.output;
            b.section(SectionKind::Module(b.modules.len() - 1), Some(si), start);
        }
    }

    let start = b.graph.len();
    if arch.is_conv() {
        x = b.graph.push(Op::GlobalAvgPool, &[x]);
    }
    let last = arch.at_stage(config.stages.len() - 1).base_width();
    b.dense(x, "head", "fc", last, config.classes);
    b.section(SectionKind::Head, None, start);
    b.graph.validate()?;

    Ok(Model {
        graph: b.graph,
        params: b.params,
        modules: b.modules,
        sections: b.sections,
        meta: ModelMeta { config, arch: *arch, beta, seed, iteration: 0, lowering },
    })
}

/// Lowers a single module whose input is one block-shaped sample (`[dim]` for
/// dense blocks, `[C, spatial, spatial]` for conv blocks). Block share keys
/// are `"M.F"`, `"M.G"`, ...
pub fn lower_module<T: Scalar>(
    kind: ModuleKind,
    arch: &BlockArch,
    spatial: usize,
    beta: f64,
    lowering: Lowering,
    seed: u64,
) -> Result<ModuleGraph<T>, BuildError> {
    arch.check()?;
    let shape = match *arch {
        BlockArch::Dense { dim, .. } => vec![dim],
        BlockArch::Conv { channels, .. } => vec![channels, spatial, spatial],
    };
    let mut b = Builder::<T>::new(&shape, seed);
    let info = b.module(Graph::INPUT, kind, arch, beta, lowering, 0, 0, "M")?;
    b.graph.validate()?;
    Ok(ModuleGraph { graph: b.graph, params: b.params, info })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::preset;

    #[test]
    fn arch_descriptors() {
        let a: BlockArch = "dense:4,8".parse().unwrap();
        assert_eq!(a, BlockArch::Dense { dim: 4, hidden: 8 });
        assert_eq!(a.to_string(), "dense:4,8");
        assert_eq!(a.block_params(), 76);
        assert!("conv:6,4".parse::<BlockArch>().is_err());
        assert!("mlp:4,8".parse::<BlockArch>().is_err());
    }

    #[test]
    fn baseline_has_twelve_modules() {
        let m = lower::<f32>(&preset("ir-3-6-3").unwrap(), &BlockArch::Dense { dim: 4, hidden: 8 }, 1.0, 0).unwrap();
        assert_eq!(m.modules.len(), 12);
        assert_eq!(m.sections.iter().filter(|s| matches!(s.kind, SectionKind::Module(_))).count(), 12);
        for k in m.graph.nodes().iter().filter_map(|n| match &n.op {
            Op::Dense { param, .. } | Op::Conv2d { param, .. } | Op::ChannelNorm { param, .. } => Some(param),
            _ => None,
        }) {
            assert!(m.params.contains_key(&k.share_key));
        }
    }

    #[test]
    fn memoized_block_counts() {
        let arch = BlockArch::Dense { dim: 4, hidden: 8 };
        for kind in ["poly-2", "poly-3", "mpoly-2", "mpoly-3", "2-way", "ir"] {
            let kind: ModuleKind = kind.parse().unwrap();
            let k = kind.order() as usize;
            let c = lower_module::<f64>(kind, &arch, 1, 1.0, Lowering::Cascaded, 0).unwrap();
            let n = lower_module::<f64>(kind, &arch, 1, 1.0, Lowering::Naive, 0).unwrap();
            match kind {
                ModuleKind::KWay(_) => assert_eq!(c.info.block_apps.len(), k),
                _ => {
                    assert_eq!(c.info.block_apps.len(), k);
                    assert_eq!(n.info.block_apps.len(), k * (k + 1) / 2);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = preset("ir-3-6-3").unwrap();
        let arch = BlockArch::Conv { channels: 8, reduction: 2 };
        let a = lower::<f32>(&cfg, &arch, 0.3, 5).unwrap();
        let b = lower::<f32>(&cfg, &arch, 0.3, 5).unwrap();
        let c = lower::<f32>(&cfg, &arch, 0.3, 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }
}
