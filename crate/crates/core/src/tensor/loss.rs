use super::{EngineError, Scalar, Tensor};

/// Row-wise softmax of `[N, K]` logits, computed in `f64`.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x.as_f64() - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Mean cross-entropy of `[N, K]` logits against integer labels, and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>), EngineError> {
    if logits.rank() != 2 || logits.batch() != labels.len() {
        return Err(EngineError::Shape(format!(
            "logits {:?} against {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(EngineError::Shape(format!("label {bad} out of range for {k} classes")));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (p, &y) in probs.iter().zip(labels) {
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for (j, &pj) in p.iter().enumerate() {
            let g = if j == y { pj - 1.0 } else { pj };
            grad.push(T::cast(g / n as f64));
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}
