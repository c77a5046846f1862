//! Central finite differences for checking analytic gradients.

use super::{backward, forward, softmax_cross_entropy, EngineError, Graph, Mode, ParamStore, Tensor};

/// Numerical gradient of `loss` with respect to every trainable tensor,
/// `(L(p+h) - L(p-h)) / 2h` per coordinate.
pub fn finite_diff_grad(
    params: &ParamStore<f64>,
    h: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> ParamStore<f64> {
    let mut out = params.zeros_like_trainable();
    let mut probe = params.clone();
    let slots: Vec<(String, String, usize)> = params
        .iter()
        .filter(|(_, _, p)| p.trainable)
        .map(|(k, n, p)| (k.to_string(), n.to_string(), p.value.len()))
        .collect();
    for (key, name, len) in slots {
        for i in 0..len {
            let orig = probe.get(&key, &name).unwrap().data()[i];
            probe.get_mut(&key, &name).unwrap().data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.get_mut(&key, &name).unwrap().data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.get_mut(&key, &name).unwrap().data_mut()[i] = orig;
            out.get_mut(&key, &name).unwrap().data_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// `max|a-b| / max(max|a|, max|b|)`; zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on different lengths");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst [`relative_error`] over all tensors present in `analytic`, with the
/// offending `share_key/name`.
pub fn max_relative_error(analytic: &ParamStore<f64>, numeric: &ParamStore<f64>) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (k, n, p) in analytic.iter() {
        let other = numeric.get(k, n).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; p.value.len()]);
        let e = relative_error(p.value.data(), &other);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, format!("{k}/{n}"));
        }
    }
    worst
}

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `share_key/name` of the worst tensor, or `input`.
    pub worst: String,
}

/// Compares backward against central differences for the mean softmax
/// cross-entropy of `graph`'s output (flattened per sample) on `labels`,
/// over every trainable tensor and the input. Tensors whose gradients are
/// below 1e-9 on both sides count as exact zeros.
pub fn check_gradients(
    graph: &Graph,
    params: &ParamStore<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    h: f64,
) -> Result<GradCheck, EngineError> {
    let loss = |p: &ParamStore<f64>, x: &Tensor<f64>| -> Result<(f64, Tensor<f64>, Tensor<f64>), EngineError> {
        let (y, _) = forward(graph, p, x, Mode::Train)?;
        let flat = y.clone().reshape(&[y.batch(), y.len() / y.batch()])?;
        let (l, dy) = softmax_cross_entropy(&flat, labels)?;
        Ok((l, y, dy))
    };
    let (_, y, dy) = loss(params, input)?;
    let (_, tape) = forward(graph, params, input, Mode::Train)?;
    let grads = backward(&tape, &dy.reshape(y.shape())?)?;
    let numeric = finite_diff_grad(params, h, |p| loss(p, input).map(|r| r.0).unwrap_or(f64::NAN));
    let err = |a: &[f64], b: &[f64]| {
        if a.iter().chain(b).all(|v| v.abs() < 1e-9) {
            0.0
        } else {
            relative_error(a, b)
        }
    };
    let mut out = GradCheck { max_rel_err: 0.0, worst: String::new() };
    for (key, name, p) in grads.params.iter() {
        let num = numeric.get(key, name).map(|t| t.data().to_vec()).unwrap_or_default();
        let e = err(&p.value.to_f64_vec(), &num);
        if e > out.max_rel_err || out.worst.is_empty() {
            out = GradCheck { max_rel_err: e, worst: format!("{key}/{name}") };
        }
    }
    let mut num_in = vec![0.0; input.len()];
    for (i, slot) in num_in.iter_mut().enumerate() {
        let mut up = input.clone();
        up.data_mut()[i] += h;
        let mut dn = input.clone();
        dn.data_mut()[i] -= h;
        *slot = (loss(params, &up)?.0 - loss(params, &dn)?.0) / (2.0 * h);
    }
    let e = err(grads.input.data(), &num_in);
    if e > out.max_rel_err {
        out = GradCheck { max_rel_err: e, worst: "input".into() };
    }
    Ok(out)
}
