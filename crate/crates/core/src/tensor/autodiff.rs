//! Graph execution with a recorded tape, and the reverse sweep over it.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId, Op, ParamRef};
use super::kernels::{self, ConvShape, NORM_EPS};
use super::{EngineError, ParamStore, Scalar, Tensor};

/// Momentum of the running statistics kept by normalization layers.
pub const NORM_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// New running statistics produced by a training-mode normalization node.
#[derive(Clone, Debug)]
pub struct NormUpdate<T> {
    pub param: ParamRef,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Debug)]
enum Cache<T> {
    None,
    Norm { mean: Vec<T>, inv_std: Vec<T> },
    Gate(f64),
}

/// Values recorded by [`forward`] for one pass.
pub struct Tape<'a, T> {
    graph: &'a Graph,
    params: &'a ParamStore<T>,
    mode: Mode,
    values: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
    norm_updates: Vec<NormUpdate<T>>,
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.values[node]
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.values[self.graph.output()]
    }

    pub fn norm_updates(&self) -> &[NormUpdate<T>] {
        &self.norm_updates
    }

    /// First node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<(NodeId, String)> {
        self.values
            .iter()
            .position(|v| !v.is_finite())
            .map(|id| (id, self.graph.node(id).op.to_string()))
    }
}

/// Gradients of every trainable parameter and of the graph input.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: ParamStore<T>,
    pub input: Tensor<T>,
}

/// Evaluates the graph without path gating.
pub fn forward<'a, T: Scalar>(
    graph: &'a Graph,
    params: &'a ParamStore<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Tape<'a, T>), EngineError> {
    forward_gated(graph, params, input, mode, None)
}

/// Evaluates the graph. `gates[module][slot]` multiplies the matching path in
/// training mode; evaluation ignores `gates` and applies each gate's fixed
/// `eval_scale` instead.
pub fn forward_gated<'a, T: Scalar>(
    graph: &'a Graph,
    params: &'a ParamStore<T>,
    input: &Tensor<T>,
    mode: Mode,
    gates: Option<&[Vec<f64>]>,
) -> Result<(Tensor<T>, Tape<'a, T>), EngineError> {
    let shapes = graph.infer_shapes(input.batch())?;
    if input.shape() != shapes[0].as_slice() {
        return Err(EngineError::NodeShape {
            node: 0,
            op: "input".into(),
            expected: shapes[0].clone(),
            got: input.shape().to_vec(),
        });
    }
    let mut values: Vec<Tensor<T>> = Vec::with_capacity(graph.len());
    let mut caches = Vec::with_capacity(graph.len());
    let mut norm_updates = Vec::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        let x = node.inputs.first().map(|&i| &values[i]);
        let mut cache = Cache::None;
        let out = match &node.op {
            Op::Input => input.clone(),
            Op::Dense { param, inputs, outputs } => {
                let x = x.unwrap();
                let w = params.require(&param.share_key, &param.tensor("w"))?;
                let b = params.require(&param.share_key, &param.tensor("b"))?;
                check_param(id, &node.op, w, &[*outputs, *inputs])?;
                let y = kernels::dense_forward(x.data(), w.data(), b.data(), x.batch(), *inputs, *outputs);
                Tensor::new(vec![x.batch(), *outputs], y)?
            }
            Op::Conv2d { param, in_ch, out_ch, kernel, stride } => {
                let x = x.unwrap();
                let w = params.require(&param.share_key, &param.tensor("w"))?;
                let b = params.require(&param.share_key, &param.tensor("b"))?;
                check_param(id, &node.op, w, &[*out_ch, *in_ch, *kernel, *kernel])?;
                let cs = conv_shape(x.shape(), *out_ch, *kernel, *stride);
                let y = kernels::conv2d_forward(x.data(), w.data(), b.data(), &cs);
                Tensor::new(shapes[id].clone(), y)?
            }
            Op::Relu => x.unwrap().map(|v| if v > T::zero() { v } else { T::zero() }),
            Op::Add => {
                let mut acc = values[node.inputs[0]].clone();
                for &i in &node.inputs[1..] {
                    for (a, &b) in acc.data_mut().iter_mut().zip(values[i].data()) {
                        *a += b;
                    }
                }
                acc
            }
            Op::Scale(beta) => {
                let b = T::cast(*beta);
                x.unwrap().map(|v| v * b)
            }
            Op::ChannelNorm { param, channels } => {
                let x = x.unwrap();
                let gamma = params.require(&param.share_key, &param.tensor("gamma"))?;
                let beta = params.require(&param.share_key, &param.tensor("beta"))?;
                check_param(id, &node.op, gamma, &[*channels])?;
                let (mean, var) = match mode {
                    Mode::Train => {
                        let (mean, var) = kernels::channel_stats(x.data(), x.shape());
                        let rm = params.require(&param.share_key, &param.tensor("running_mean"))?;
                        let rv = params.require(&param.share_key, &param.tensor("running_var"))?;
                        let mom = T::cast(NORM_MOMENTUM);
                        let one = T::one();
                        let blend = |run: &Tensor<T>, batch: &[T]| {
                            let data = run
                                .data()
                                .iter()
                                .zip(batch)
                                .map(|(&r, &b)| mom * r + (one - mom) * b)
                                .collect();
                            Tensor::new(vec![*channels], data)
                        };
                        norm_updates.push(NormUpdate {
                            param: param.clone(),
                            running_mean: blend(rm, &mean)?,
                            running_var: blend(rv, &var)?,
                        });
                        (mean, var)
                    }
                    Mode::Eval => (
                        params.require(&param.share_key, &param.tensor("running_mean"))?.data().to_vec(),
                        params.require(&param.share_key, &param.tensor("running_var"))?.data().to_vec(),
                    ),
                };
                let eps = T::cast(NORM_EPS);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let y = kernels::channel_affine(x.data(), x.shape(), &mean, &inv_std, gamma.data(), beta.data());
                cache = Cache::Norm { mean, inv_std };
                Tensor::new(x.shape().to_vec(), y)?
            }
            Op::GlobalAvgPool => {
                let x = x.unwrap();
                Tensor::new(shapes[id].clone(), kernels::global_avg_pool(x.data(), x.shape()))?
            }
            Op::Gate { module, slot, eval_scale } => {
                let factor = match mode {
                    Mode::Train => gates
                        .and_then(|g| g.get(*module))
                        .and_then(|m| m.get(*slot))
                        .copied()
                        .unwrap_or(1.0),
                    Mode::Eval => *eval_scale,
                };
                cache = Cache::Gate(factor);
                let x = x.unwrap();
                if factor == 1.0 {
                    x.clone()
                } else if factor == 0.0 {
                    Tensor::zeros(x.shape())
                } else {
                    let f = T::cast(factor);
                    x.map(|v| v * f)
                }
            }
        };
        #[cfg(debug_assertions)]
        if !out.is_finite() && node.inputs.iter().all(|&i| values[i].is_finite()) && input.is_finite() {
            return Err(EngineError::NonFinite { node: id, op: node.op.to_string() });
        }
        values.push(out);
        caches.push(cache);
    }
    let output = values[graph.output()].clone();
    Ok((output, Tape { graph, params, mode, values, caches, norm_updates }))
}

fn check_param<T: Scalar>(id: NodeId, op: &Op, t: &Tensor<T>, want: &[usize]) -> Result<(), EngineError> {
    if t.shape() != want {
        return Err(EngineError::NodeShape {
            node: id,
            op: format!("{op} (parameter)"),
            expected: want.to_vec(),
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn conv_shape(x: &[usize], out_ch: usize, kernel: usize, stride: usize) -> ConvShape {
    ConvShape { batch: x[0], in_ch: x[1], out_ch, h: x[2], w: x[3], kernel, stride }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], data: Vec<T>) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape")),
    }
}

fn accumulate_param<T: Scalar>(grads: &mut ParamStore<T>, param: &ParamRef, suffix: &str, data: Vec<T>) {
    let name = param.tensor(suffix);
    let g = grads.get_mut(&param.share_key, &name).expect("gradient slot exists for every trainable");
    for (a, b) in g.data_mut().iter_mut().zip(data) {
        *a += b;
    }
}

/// Propagates `upstream` (gradient of the loss w.r.t. the graph output)
/// back through a training-mode tape. Parameters referenced from several
/// nodes receive the sum of all contributions.
pub fn backward<T: Scalar>(tape: &Tape<'_, T>, upstream: &Tensor<T>) -> Result<Gradients<T>, EngineError> {
    if tape.mode != Mode::Train {
        return Err(EngineError::EvalTape);
    }
    let graph = tape.graph;
    let out_id = graph.output();
    if upstream.shape() != tape.values[out_id].shape() {
        return Err(EngineError::Shape(format!(
            "upstream {:?} vs output {:?}",
            upstream.shape(),
            tape.values[out_id].shape()
        )));
    }
    let mut grads = tape.params.zeros_like_trainable();
    let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; graph.len()];
    node_grads[out_id] = Some(upstream.clone());

    for id in (0..=out_id).rev() {
        let Some(dy) = node_grads[id].take() else { continue };
        let node = graph.node(id);
        if matches!(node.op, Op::Input) {
            node_grads[id] = Some(dy);
            continue;
        }
        let xi = node.inputs[0];
        let x = &tape.values[xi];
        match &node.op {
            Op::Input => unreachable!(),
            Op::Dense { param, inputs, outputs } => {
                let w = tape.params.require(&param.share_key, &param.tensor("w"))?;
                let (dx, dw, db) =
                    kernels::dense_backward(x.data(), w.data(), dy.data(), x.batch(), *inputs, *outputs);
                accumulate_param(&mut grads, param, "w", dw);
                accumulate_param(&mut grads, param, "b", db);
                accumulate(&mut node_grads[xi], x.shape(), dx);
            }
            Op::Conv2d { param, out_ch, kernel, stride, .. } => {
                let w = tape.params.require(&param.share_key, &param.tensor("w"))?;
                let cs = conv_shape(x.shape(), *out_ch, *kernel, *stride);
                let (dx, dw, db) = kernels::conv2d_backward(x.data(), w.data(), dy.data(), &cs);
                accumulate_param(&mut grads, param, "w", dw);
                accumulate_param(&mut grads, param, "b", db);
                accumulate(&mut node_grads[xi], x.shape(), dx);
            }
            Op::Relu => {
                let y = &tape.values[id];
                let dx = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(&mut node_grads[xi], x.shape(), dx);
            }
            Op::Add => {
                for &i in &node.inputs {
                    accumulate(&mut node_grads[i], dy.shape(), dy.data().to_vec());
                }
            }
            Op::Scale(beta) => {
                let b = T::cast(*beta);
                accumulate(&mut node_grads[xi], x.shape(), dy.data().iter().map(|&g| g * b).collect());
            }
            Op::ChannelNorm { param, .. } => {
                let Cache::Norm { mean, inv_std } = &tape.caches[id] else {
                    return Err(EngineError::Graph(format!("node {id} lost its normalization cache")));
                };
                let gamma = tape.params.require(&param.share_key, &param.tensor("gamma"))?;
                let (dx, dgamma, dbeta) =
                    kernels::channel_norm_backward(x.data(), x.shape(), mean, inv_std, gamma.data(), dy.data());
                accumulate_param(&mut grads, param, "gamma", dgamma);
                accumulate_param(&mut grads, param, "beta", dbeta);
                accumulate(&mut node_grads[xi], x.shape(), dx);
            }
            Op::GlobalAvgPool => {
                let dx = kernels::global_avg_pool_backward(dy.data(), x.shape());
                accumulate(&mut node_grads[xi], x.shape(), dx);
            }
            Op::Gate { .. } => {
                let factor = match tape.caches[id] {
                    Cache::Gate(f) => f,
                    _ => 1.0,
                };
                if factor != 0.0 {
                    let f = T::cast(factor);
                    accumulate(&mut node_grads[xi], x.shape(), dy.data().iter().map(|&g| g * f).collect());
                }
            }
        }
    }
    let input = node_grads[Graph::INPUT]
        .take()
        .unwrap_or_else(|| Tensor::zeros(tape.values[Graph::INPUT].shape()));
    Ok(Gradients { params: grads, input })
}
