//! Scalar objectives over logits, each returned together with `∂loss/∂logits`
//! so the model's backward pass can take it from there.

use crate::error::{Error, Result};
use crate::numcore::matrix::Matrix;
use crate::numcore::prob::{plogp, row_entropy, softmax};

/// A scalar loss value and its gradient with respect to the logits that
/// produced it.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub dlogits: Matrix,
}

impl LossGrad {
    pub fn zero(rows: usize, cols: usize) -> Self {
        LossGrad {
            value: 0.0,
            dlogits: Matrix::zeros(rows, cols),
        }
    }

    /// `self + weight·other`.
    pub fn add_scaled(mut self, other: &LossGrad, weight: f64) -> Result<Self> {
        self.value += weight * other.value;
        self.dlogits = self.dlogits.zip_with(&other.dlogits, |a, b| a + weight * b)?;
        Ok(self)
    }

    fn check(self) -> Result<Self> {
        if !self.value.is_finite() || !self.dlogits.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok(self)
    }
}

#[inline]
fn safe_ln(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

/// Mean softmax entropy over the rows where `mask` is set. An empty mask
/// gives a zero loss with a zero gradient.
pub fn masked_entropy(logits: &Matrix, mask: &[bool]) -> Result<LossGrad> {
    if mask.len() != logits.rows() {
        return Err(Error::shape("entropy mask length"));
    }
    let probs = softmax(logits)?;
    let count = mask.iter().filter(|&&m| m).count();
    let mut out = LossGrad::zero(logits.rows(), logits.cols());
    if count == 0 {
        return Ok(out);
    }
    let scale = 1.0 / count as f64;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let p = probs.row(i);
        let h = row_entropy(p);
        out.value += h * scale;
        // ∂H/∂z_j = −p_j (ln p_j + H)
        for (d, &pj) in out.dlogits.row_mut(i).iter_mut().zip(p) {
            *d = -(plogp(pj) + pj * h) * scale;
        }
    }
    out.check()
}

/// Mean entropy over every row.
pub fn mean_entropy(logits: &Matrix) -> Result<LossGrad> {
    masked_entropy(logits, &vec![true; logits.rows()])
}

/// Information maximization: mean per-row entropy minus the entropy of the
/// mean prediction.
pub fn information_maximization(logits: &Matrix) -> Result<LossGrad> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::invalid("information maximization over an empty batch"));
    }
    let probs = softmax(logits)?;
    let mean = probs.column_means();
    let ln_mean: Vec<f64> = mean.iter().map(|&m| safe_ln(m)).collect();
    let inv_n = 1.0 / n as f64;
    let mut out = LossGrad::zero(n, logits.cols());
    for i in 0..n {
        let p = probs.row(i);
        let h = row_entropy(p);
        out.value += h * inv_n;
        let p_ln_mean: f64 = p.iter().zip(&ln_mean).map(|(a, b)| a * b).sum();
        for (j, d) in out.dlogits.row_mut(i).iter_mut().enumerate() {
            let pj = p[j];
            let ent = -(plogp(pj) + pj * h);
            let div = pj * (ln_mean[j] - p_ln_mean);
            *d = (ent + div) * inv_n;
        }
    }
    out.value -= row_entropy(&mean);
    out.check()
}

/// Mean cross-entropy against hard labels.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<LossGrad> {
    let n = logits.rows();
    if labels.len() != n {
        return Err(Error::shape("label count"));
    }
    if n == 0 {
        return Ok(LossGrad::zero(0, logits.cols()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    let probs = softmax(logits)?;
    let inv_n = 1.0 / n as f64;
    let mut out = LossGrad::zero(n, logits.cols());
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.value += (lse - z[y]) * inv_n;
        for (j, d) in out.dlogits.row_mut(i).iter_mut().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            *d = (probs[(i, j)] - target) * inv_n;
        }
    }
    out.check()
}

/// `Σ_i w_i · CE(targets_i, softmax(logits_i))` for probability-row targets.
/// Weights are used as given (pass `1/n` each for a plain mean).
pub fn soft_cross_entropy(logits: &Matrix, targets: &Matrix, weights: &[f64]) -> Result<LossGrad> {
    if logits.shape() != targets.shape() || weights.len() != logits.rows() {
        return Err(Error::shape("soft cross-entropy operands"));
    }
    let n = logits.rows();
    let mut out = LossGrad::zero(n, logits.cols());
    for (i, &w) in weights.iter().enumerate() {
        let z = logits.row(i);
        let t = targets.row(i);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let t_sum: f64 = t.iter().sum();
        let ce: f64 = z.iter().zip(t).map(|(zj, tj)| tj * (lse - zj)).sum();
        out.value += w * ce;
        for (j, d) in out.dlogits.row_mut(i).iter_mut().enumerate() {
            let pj = (z[j] - lse).exp();
            *d = w * (pj * t_sum - t[j]);
        }
    }
    out.check()
}
