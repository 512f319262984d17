use super::Tensor;
use crate::error::{input_err, Result};

/// Probabilities below this are clamped before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log_softmax(logits)[i]` via log-sum-exp.
fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits[i] - lse
}

pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return input_err(format!("label {label} out of range for {} classes", logits.len()));
    }
    Ok(-log_softmax_at(logits, label))
}

fn row_entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&q| if q == 0.0 { 0.0 } else { q * q.max(LOG_CLAMP).ln() }).sum::<f64>()
}

fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&q| !(q >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return input_err(format!("row is not a probability vector (sum {sum})"));
    }
    Ok(())
}

/// Mean Shannon entropy of a batch of probability rows, with `0 log 0 = 0`.
pub fn entropy_loss<R: AsRef<[f64]>>(probabilities: &[R]) -> Result<f64> {
    if probabilities.is_empty() {
        return input_err("entropy of an empty batch");
    }
    let mut total = 0.0;
    for row in probabilities {
        check_simplex(row.as_ref())?;
        total += row_entropy(row.as_ref());
    }
    Ok(total / probabilities.len() as f64)
}

/// Per-sample class probabilities of a `B x K x 1` logits tensor.
pub fn batch_softmax(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.batch()).map(|b| softmax(logits.sample_values(b))).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if labels.len() != logits.batch() {
        return input_err(format!("{} labels for batch of {}", labels.len(), logits.batch()));
    }
    let n = logits.batch() as f64;
    let classes = logits.channels() * logits.len();
    let mut grad = Tensor::zeros(logits.batch(), logits.channels(), logits.len());
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let z = logits.sample_values(b);
        loss += softmax_cross_entropy(z, y)?;
        let p = softmax(z);
        for k in 0..classes {
            let ind = if k == y { 1.0 } else { 0.0 };
            grad.data_mut()[b * classes + k] = (p[k] - ind) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Mean prediction entropy over the batch and its gradient w.r.t. the logits.
///
/// The gradient is exact for the clamped entropy actually evaluated.
pub fn entropy_with_grad(logits: &Tensor) -> Result<(f64, Tensor)> {
    let n = logits.batch() as f64;
    let classes = logits.channels() * logits.len();
    let mut grad = Tensor::zeros(logits.batch(), logits.channels(), logits.len());
    let mut loss = 0.0;
    for b in 0..logits.batch() {
        let p = softmax(logits.sample_values(b));
        loss += row_entropy(&p);
        // d(-q log max(q, c)) / dq
        let dp: Vec<f64> = p
            .iter()
            .map(|&q| if q > LOG_CLAMP { -(q.ln() + 1.0) } else { -LOG_CLAMP.ln() })
            .collect();
        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for k in 0..classes {
            grad.data_mut()[b * classes + k] = p[k] * (dp[k] - dot) / n;
        }
    }
    if !loss.is_finite() {
        return Err(crate::TtaError::Numeric("entropy loss is not finite".into()));
    }
    Ok((loss / n, grad))
}
