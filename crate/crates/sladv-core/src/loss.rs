//! Softmax cross-entropy over a batch of logits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy over the batch plus the gradient w.r.t. the logits.
///
/// The softmax subtracts the per-row maximum before exponentiating, so large
/// logits do not overflow. The returned gradient is already divided by the
/// batch size: it is the gradient of the mean loss.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 {
        return Err(Error::config(format!(
            "logits must be [N, C], got {:?}",
            logits.shape()
        )));
    }
    let n = logits.shape()[0];
    let c = logits.shape()[1];
    if labels.len() != n {
        return Err(Error::config(format!(
            "{} labels for a batch of {n} logits rows",
            labels.len()
        )));
    }
    let ld = logits.data();
    let mut grad = vec![0.0; n * c];
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for s in 0..n {
        let y = labels[s];
        if y >= c {
            return Err(Error::input(format!("label {y} out of range for {c} classes")));
        }
        let row = &ld[s * c..(s + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        total += log_denom - (row[y] - max);
        let grow = &mut grad[s * c..(s + 1) * c];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            grow[j] = (p - if j == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((
        total * inv_n,
        Tensor::new(logits.shape().to_vec(), grad)?,
    ))
}

/// Fraction of rows whose argmax equals the label. Ties resolve to the lowest
/// index, matching the deterministic evaluation everywhere else.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::config(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let n = logits.shape()[0];
    let c = logits.shape()[1];
    let ld = logits.data();
    let mut hits = 0usize;
    for s in 0..n {
        let row = &ld[s * c..(s + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[s] {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}
