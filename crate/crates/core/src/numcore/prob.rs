use crate::error::{Error, Result};
use crate::numcore::matrix::{dot, l2_norm, Matrix};

/// Row-wise softmax with max-shift.
pub fn softmax(logits: &Matrix) -> Result<Matrix> {
    logits.ensure_finite("softmax input")?;
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `p ln p` with the `0 ln 0 = 0` convention.
#[inline]
pub(crate) fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

pub(crate) fn row_entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| plogp(v)).sum::<f64>()
}

/// Per-row Shannon entropy (natural log).
pub fn entropy(probs: &Matrix) -> Result<Vec<f64>> {
    probs.ensure_finite("entropy input")?;
    probs
        .row_iter()
        .enumerate()
        .map(|(row, p)| {
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0) {
                return Err(Error::NotProbability { row, sum });
            }
            Ok(row_entropy(p).max(0.0))
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits:
/// `dz_j = p_j (g_j − Σ_k p_k g_k)`.
pub fn softmax_backward(probs: &Matrix, dprobs: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    if probs.shape() != dprobs.shape() {
        return Err(Error::shape("softmax_backward operands"));
    }
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = dprobs.row(i);
        let inner = dot(p, g);
        for (o, (&pj, &gj)) in out.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *o = pj * (gj - inner);
        }
    }
    Ok(out)
}

/// L2-normalized copy; zero vectors stay zero.
pub fn normalized(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}
