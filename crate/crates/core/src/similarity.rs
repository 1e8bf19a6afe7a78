//! Distributional distance between two feature sets: RBF-kernel maximum
//! mean discrepancy and the similarity score `S = exp(−MMD)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::matrix::{dot, squared_distance};
use crate::numcore::Matrix;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// σ² = median squared pairwise distance of the pooled sample.
    Median,
    Fixed(f64),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// V-statistic over all pairs, diagonal included. Never negative.
    Biased,
    /// U-statistic: within-set terms exclude the diagonal.
    Unbiased,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmdConfig {
    pub bandwidth: Bandwidth,
    pub estimator: Estimator,
    /// Per-side cap; larger inputs are subsampled with a fixed stride.
    pub max_samples: usize,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            bandwidth: Bandwidth::Median,
            estimator: Estimator::Biased,
            max_samples: 2000,
        }
    }
}

impl MmdConfig {
    pub fn fixed(sigma: f64) -> Self {
        MmdConfig {
            bandwidth: Bandwidth::Fixed(sigma),
            ..MmdConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_samples < 2 {
            return Err(Error::invalid("max_samples must be at least 2"));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("fixed bandwidth {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult {
    /// `√max(MMD², 0)`.
    pub mmd: f64,
    /// Estimator output before clamping (may be negative when unbiased).
    pub mmd_squared: f64,
    /// `exp(−mmd)`.
    pub score: f64,
    /// Kernel bandwidth σ in `k(a, b) = exp(−‖a − b‖²/(2σ²))`.
    pub bandwidth: f64,
    pub m: usize,
    pub n: usize,
}

/// Every `len/cap`-th row when `len > cap`.
fn strided(x: &Matrix, cap: usize) -> Matrix {
    if x.rows() <= cap {
        return x.clone();
    }
    let idx: Vec<usize> = (0..cap).map(|i| i * x.rows() / cap).collect();
    x.select_rows(&idx)
}

fn check_inputs(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.cols() != y.cols() {
        return Err(Error::shape(format!(
            "feature widths {} and {}",
            x.cols(),
            y.cols()
        )));
    }
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::invalid(format!(
            "MMD needs at least two samples per side (got {} and {})",
            x.rows(),
            y.rows()
        )));
    }
    x.ensure_finite("similarity input")?;
    y.ensure_finite("similarity input")
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, &mut upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Median-heuristic bandwidth σ over the pooled sample (subsampled to
/// `max_samples` points): σ² is the median squared distance over distinct
/// pairs. If more than half the pairs coincide the median of the nonzero
/// distances is used instead.
pub fn median_bandwidth(x: &Matrix, y: &Matrix, max_samples: usize) -> Result<f64> {
    if x.cols() != y.cols() {
        return Err(Error::shape("median bandwidth inputs"));
    }
    let pooled = strided(&Matrix::vstack(&[x, y])?, max_samples.max(2));
    let n = pooled.rows();
    if n < 2 {
        return Err(Error::invalid("median bandwidth needs two points"));
    }
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let pooled = &pooled;
            (i + 1..n).map(move |j| squared_distance(pooled.row(i), pooled.row(j)))
        })
        .collect();
    let mut sigma2 = median(&mut d2);
    if sigma2 == 0.0 {
        let mut positive: Vec<f64> = d2.into_iter().filter(|&v| v > 0.0).collect();
        if positive.is_empty() {
            return Err(Error::invalid("all points identical: zero bandwidth"));
        }
        sigma2 = median(&mut positive);
    }
    Ok(sigma2.sqrt())
}

/// Sum of `k(a_i, b_j)` over all i, j (or i ≠ j when `skip_diag`), with
/// squared distances from cached norms. Row sums are formed in parallel
/// and added in row order.
fn kernel_sum(a: &Matrix, b: &Matrix, gamma: f64, skip_diag: bool) -> f64 {
    let na: Vec<f64> = a.row_iter().map(|r| dot(r, r)).collect();
    let nb: Vec<f64> = b.row_iter().map(|r| dot(r, r)).collect();
    let rows: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            let mut s = 0.0;
            for (j, (bj, nbj)) in b.row_iter().zip(&nb).enumerate() {
                if skip_diag && i == j {
                    continue;
                }
                let d2 = (na[i] + nbj - 2.0 * dot(ai, bj)).max(0.0);
                s += (-gamma * d2).exp();
            }
            s
        })
        .collect();
    rows.iter().sum()
}

/// The cross term summed in an order that does not depend on argument
/// order, so swapping X and Y gives a bit-identical result.
fn cross_sum(x: &Matrix, y: &Matrix, gamma: f64) -> f64 {
    let key = |a: &Matrix| (a.rows(), a.cols());
    let swap = match key(x).cmp(&key(y)) {
        std::cmp::Ordering::Equal => x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .is_some_and(|o| o.is_gt()),
        o => o.is_gt(),
    };
    if swap {
        kernel_sum(y, x, gamma, false)
    } else {
        kernel_sum(x, y, gamma, false)
    }
}

fn mmd_squared_with(x: &Matrix, y: &Matrix, sigma: f64, estimator: Estimator) -> f64 {
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let m = x.rows() as f64;
    let n = y.rows() as f64;
    let cross = cross_sum(x, y, gamma);
    match estimator {
        Estimator::Biased => {
            kernel_sum(x, x, gamma, false) / (m * m) + kernel_sum(y, y, gamma, false) / (n * n)
                - 2.0 * cross / (m * n)
        }
        Estimator::Unbiased => {
            kernel_sum(x, x, gamma, true) / (m * (m - 1.0))
                + kernel_sum(y, y, gamma, true) / (n * (n - 1.0))
                - 2.0 * cross / (m * n)
        }
    }
}

fn resolve_bandwidth(x: &Matrix, y: &Matrix, cfg: &MmdConfig) -> Result<f64> {
    match cfg.bandwidth {
        Bandwidth::Fixed(s) => Ok(s),
        Bandwidth::Median => median_bandwidth(x, y, cfg.max_samples),
    }
}

/// `E[k(x,x′)] + E[k(y,y′)] − 2E[k(x,y)]` per the configured estimator.
pub fn mmd_squared(x: &Matrix, y: &Matrix, cfg: &MmdConfig) -> Result<f64> {
    cfg.validate()?;
    check_inputs(x, y)?;
    let x = strided(x, cfg.max_samples);
    let y = strided(y, cfg.max_samples);
    let sigma = resolve_bandwidth(&x, &y, cfg)?;
    Ok(mmd_squared_with(&x, &y, sigma, cfg.estimator))
}

pub fn similarity_score(x: &Matrix, y: &Matrix, cfg: &MmdConfig) -> Result<SimilarityResult> {
    cfg.validate()?;
    check_inputs(x, y)?;
    let x = strided(x, cfg.max_samples);
    let y = strided(y, cfg.max_samples);
    let sigma = resolve_bandwidth(&x, &y, cfg)?;
    let raw = mmd_squared_with(&x, &y, sigma, cfg.estimator);
    let mmd = raw.max(0.0).sqrt();
    Ok(SimilarityResult {
        mmd,
        mmd_squared: raw,
        score: (-mmd).exp(),
        bandwidth: sigma,
        m: x.rows(),
        n: y.rows(),
    })
}
