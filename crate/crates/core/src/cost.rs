//! Analytic parameter and multiply-accumulate counts.
//!
//! MACs are per forward sample: `in·out` for dense layers and
//! `Ho·Wo·k²·Cin·Cout` for convolutions. Elementwise work (norm, ReLU, adds,
//! scaling, pooling) counts zero MACs. Normalization affine parameters count
//! as parameters; running statistics do not.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::algebra::ModuleKind;
use crate::builder::{lower, BlockArch, BuildError, Model, SectionKind};
use crate::dsl::NetworkConfig;
use crate::tensor::{EngineError, Graph, NodeId, Op, ParamStore, Scalar};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub config: String,
    /// Stage name, or `stem` / `head`.
    pub stage: String,
    pub module_index: Option<usize>,
    /// Module kind, or `stem` / `transition` / `head`.
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    pub block_apps: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: String,
    pub params: u64,
    pub macs: u64,
    pub block_apps: u64,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Sums over rows matching `keep`.
    pub fn macs_where(&self, keep: impl Fn(&CostRow) -> bool) -> u64 {
        self.rows.iter().filter(|r| keep(r)).map(|r| r.macs).sum()
    }
}

pub fn rows_to_csv<R: Serialize>(rows: &[R]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("row serializes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is UTF-8")
}

/// MACs of one node given the shapes of all nodes (batch 1).
fn node_macs(graph: &Graph, shapes: &[Vec<usize>], id: NodeId) -> u64 {
    match &graph.node(id).op {
        Op::Dense { inputs, outputs, .. } => (inputs * outputs) as u64,
        Op::Conv2d { in_ch, out_ch, kernel, .. } => {
            let s = &shapes[id];
            (s[2] * s[3] * kernel * kernel * in_ch * out_ch) as u64
        }
        _ => 0,
    }
}

/// MACs of the nodes in `nodes` for one sample of the graph's input shape.
pub fn graph_macs(graph: &Graph, nodes: impl IntoIterator<Item = NodeId>) -> Result<u64, EngineError> {
    let shapes = graph.infer_shapes(1)?;
    Ok(nodes.into_iter().map(|id| node_macs(graph, &shapes, id)).sum())
}

/// Trainable scalars of the share keys referenced by `nodes`, skipping keys
/// already in `seen`.
pub fn graph_params<T: Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    nodes: impl IntoIterator<Item = NodeId>,
    seen: &mut HashSet<String>,
) -> u64 {
    let mut total = 0;
    for id in nodes {
        let key = match &graph.node(id).op {
            Op::Dense { param, .. } | Op::Conv2d { param, .. } | Op::ChannelNorm { param, .. } => &param.share_key,
            _ => continue,
        };
        if seen.insert(key.clone()) {
            total += params.group_trainable_count(key) as u64;
        }
    }
    total
}

/// Full breakdown for a model at its own input size.
pub fn analyze<T: Scalar>(model: &Model<T>) -> Result<CostReport, EngineError> {
    analyze_at(model, model.meta.config.input_size)
}

/// Full breakdown with the input resized to `size × size`.
pub fn analyze_at<T: Scalar>(model: &Model<T>, size: usize) -> Result<CostReport, EngineError> {
    let mut shape = model.input_shape().to_vec();
    let n = shape.len();
    shape[n - 2] = size;
    shape[n - 1] = size;
    let graph = model.graph.with_input_shape(&shape);
    let shapes = graph.infer_shapes(1)?;
    let label = model.meta.config.to_string();
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for sec in &model.sections {
        let stage_name = |s: Option<usize>| s.map(|i| model.meta.config.stages[i].name.clone());
        let (stage, module_index, kind, block_apps) = match sec.kind {
            SectionKind::Stem => ("stem".to_string(), None, "stem".to_string(), 0),
            SectionKind::Head => ("head".to_string(), None, "head".to_string(), 0),
            SectionKind::Transition => (stage_name(sec.stage).unwrap(), None, "transition".to_string(), 0),
            SectionKind::Module(i) => {
                let m = &model.modules[i];
                (stage_name(sec.stage).unwrap(), Some(m.index), m.kind.to_string(), m.block_apps.len() as u64)
            }
        };
        rows.push(CostRow {
            config: label.clone(),
            stage,
            module_index,
            kind,
            params: graph_params(&graph, &model.params, sec.nodes.clone(), &mut seen),
            macs: sec.nodes.clone().map(|id| node_macs(&graph, &shapes, id)).sum(),
            block_apps,
        });
    }
    Ok(CostReport {
        config: label,
        params: rows.iter().map(|r| r.params).sum(),
        macs: rows.iter().map(|r| r.macs).sum(),
        block_apps: rows.iter().map(|r| r.block_apps).sum(),
        rows,
    })
}

pub fn count_params<T: Scalar>(model: &Model<T>) -> u64 {
    let mut seen = HashSet::new();
    graph_params(&model.graph, &model.params, 0..model.graph.len(), &mut seen)
}

pub fn count_macs<T: Scalar>(model: &Model<T>) -> Result<u64, EngineError> {
    Ok(analyze(model)?.macs)
}

pub fn count_block_apps<T: Scalar>(model: &Model<T>) -> u64 {
    model.modules.iter().map(|m| m.block_apps.len() as u64).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub config: String,
    pub params: u64,
    pub macs: u64,
    pub block_apps: u64,
    pub accuracy: Option<f64>,
}

/// One cost row per labelled configuration, joined with measured accuracy
/// when available. Accuracy keys that match no label, and labels with no
/// accuracy while a map is given, are reported as warnings.
pub fn efficiency_table(
    configs: &[(String, NetworkConfig)],
    arch: &BlockArch,
    accuracy: Option<&HashMap<String, f64>>,
) -> Result<(Vec<EfficiencyRow>, Vec<String>), BuildError> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (label, cfg) in configs {
        let model = lower::<f32>(cfg, arch, 1.0, 0)?;
        let report = analyze(&model)?;
        let acc = accuracy.and_then(|m| m.get(label).copied());
        if accuracy.is_some() && acc.is_none() {
            warnings.push(format!("no accuracy for config '{label}'"));
        }
        rows.push(EfficiencyRow {
            config: label.clone(),
            params: report.params,
            macs: report.macs,
            block_apps: report.block_apps,
            accuracy: acc,
        });
    }
    if let Some(map) = accuracy {
        let mut unknown: Vec<&String> = map.keys().filter(|k| !configs.iter().any(|(l, _)| l == *k)).collect();
        unknown.sort();
        for k in unknown {
            warnings.push(format!("accuracy given for unknown config '{k}'"));
        }
    }
    Ok((rows, warnings))
}

/// The stage ablation grid: the baseline, then every stage with all of its
/// units replaced by each of the six ablation kinds. Labels are `baseline`
/// and `"{stage}:{kind}"`.
pub fn ablation_grid(base: &NetworkConfig) -> Vec<(String, NetworkConfig)> {
    let mut out = vec![("baseline".to_string(), base.clone())];
    for (si, stage) in base.stages.iter().enumerate() {
        for kind in ModuleKind::ablation_kinds() {
            out.push((format!("{}:{kind}", stage.name), base.clone().with_stage_kind(si, kind)));
        }
    }
    out
}
