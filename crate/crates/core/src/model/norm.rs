use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tape::{StandardizeStats, StatAxis};
use crate::numcore::Matrix;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    BatchNorm,
    LayerNorm,
    /// Instance-aware batch norm: batch statistics soft-shrunk toward the
    /// running statistics.
    Iabn,
    /// Robust batch norm: instance and global statistics blended, global
    /// statistics tracked by a slow moving average.
    Rbn,
}

impl NormKind {
    pub fn has_running_stats(self) -> bool {
        self != NormKind::LayerNorm
    }
}

/// Which statistics a normalization layer uses in a forward pass.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum StatsMode {
    /// Batch statistics where the layer supports them; running statistics
    /// are updated.
    Train,
    /// Running statistics; nothing is updated.
    Eval,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_IABN_KAPPA: f64 = 4.0;
pub const DEFAULT_RBN_ALPHA: f64 = 0.05;
pub const DEFAULT_RBN_MOMENTUM: f64 = 0.05;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub kind: NormKind,
    pub gamma: Matrix,
    pub beta: Matrix,
    /// Running (IABN, BatchNorm) or global (RBN) statistics. Empty for LayerNorm.
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    /// IABN threshold multiplier κ.
    pub shrink_kappa: f64,
    /// RBN instance weight α.
    pub fuse_alpha: f64,
}

/// Pending running-statistics update produced by a `Train` forward.
#[derive(Clone, Debug)]
pub(crate) struct StatsUpdate {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl NormLayer {
    pub fn new(kind: NormKind, width: usize) -> Self {
        let (running_mean, running_var) = if kind.has_running_stats() {
            (vec![0.0; width], vec![1.0; width])
        } else {
            (Vec::new(), Vec::new())
        };
        let momentum = match kind {
            NormKind::Rbn => DEFAULT_RBN_MOMENTUM,
            _ => DEFAULT_BN_MOMENTUM,
        };
        NormLayer {
            kind,
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
            running_mean,
            running_var,
            momentum,
            eps: DEFAULT_EPS,
            shrink_kappa: DEFAULT_IABN_KAPPA,
            fuse_alpha: DEFAULT_RBN_ALPHA,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }

    /// Re-labels a batch-statistics layer as another batch-statistics kind,
    /// keeping the affine parameters and running statistics.
    pub fn convert(&mut self, kind: NormKind) -> Result<()> {
        if self.kind.has_running_stats() != kind.has_running_stats() {
            return Err(Error::invalid(format!(
                "cannot convert {:?} to {:?}",
                self.kind, kind
            )));
        }
        if kind == NormKind::Rbn && self.kind != NormKind::Rbn {
            self.momentum = DEFAULT_RBN_MOMENTUM;
        }
        self.kind = kind;
        Ok(())
    }

    /// Statistics for standardizing `h`, plus the running-statistics update
    /// a `Train` pass would commit.
    pub(crate) fn statistics(
        &self,
        h: &Matrix,
        mode: StatsMode,
    ) -> Result<(StatAxis, StandardizeStats, Option<StatsUpdate>)> {
        let width = self.width();
        if h.cols() != width {
            return Err(Error::shape(format!(
                "normalization of width {width} applied to {} features",
                h.cols()
            )));
        }
        if self.kind == NormKind::LayerNorm {
            let (mean, var) = row_moments(h);
            let ones = vec![1.0; h.rows()];
            let stats = StandardizeStats {
                batch_mean: mean.clone(),
                mean,
                var,
                mean_coeff: ones.clone(),
                var_coeff: ones,
                eps: self.eps,
            };
            return Ok((StatAxis::Row, stats, None));
        }

        let n = h.rows();
        let (batch_mean, batch_var) = column_moments(h);
        let frozen = |layer: &NormLayer| StandardizeStats {
            mean: layer.running_mean.clone(),
            var: layer.running_var.clone(),
            batch_mean: batch_mean.clone(),
            mean_coeff: vec![0.0; width],
            var_coeff: vec![0.0; width],
            eps: layer.eps,
        };
        let update = (mode == StatsMode::Train && n >= 2).then(|| StatsUpdate {
            mean: batch_mean.clone(),
            var: batch_var.clone(),
        });

        let stats = match (self.kind, mode) {
            (NormKind::BatchNorm, StatsMode::Eval) => frozen(self),
            (NormKind::BatchNorm, StatsMode::Train) if n >= 2 => StandardizeStats {
                mean: batch_mean.clone(),
                var: batch_var.clone(),
                batch_mean: batch_mean.clone(),
                mean_coeff: vec![1.0; width],
                var_coeff: vec![1.0; width],
                eps: self.eps,
            },
            (NormKind::BatchNorm, StatsMode::Train) => frozen(self),
            (NormKind::Iabn, _) if n < 2 => frozen(self),
            (NormKind::Iabn, _) => {
                let shrink = ShrinkParams {
                    kappa: self.shrink_kappa,
                    n,
                };
                let (mean, mean_coeff, var, var_coeff) = iabn_with_coefficients(
                    &batch_mean,
                    &batch_var,
                    &self.running_mean,
                    &self.running_var,
                    shrink,
                )?;
                StandardizeStats {
                    mean,
                    var,
                    batch_mean: batch_mean.clone(),
                    mean_coeff,
                    var_coeff,
                    eps: self.eps,
                }
            }
            (NormKind::Rbn, _) => {
                let a = self.fuse_alpha;
                let (mean, var) = fuse(&batch_mean, &batch_var, &self.running_mean, &self.running_var, a);
                StandardizeStats {
                    mean,
                    var,
                    batch_mean: batch_mean.clone(),
                    mean_coeff: vec![a; width],
                    var_coeff: vec![a; width],
                    eps: self.eps,
                }
            }
            (NormKind::LayerNorm, _) => unreachable!(),
        };
        Ok((StatAxis::Column, stats, update))
    }

    pub(crate) fn commit(&mut self, update: &StatsUpdate) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&update.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&update.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

fn column_moments(h: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mean = h.column_means();
    let n = h.rows().max(1) as f64;
    let mut var = vec![0.0; h.cols()];
    for row in h.row_iter() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn row_moments(h: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let d = h.cols().max(1) as f64;
    h.row_iter()
        .map(|row| {
            let m = row.iter().sum::<f64>() / d;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d;
            (m, v)
        })
        .unzip()
}

fn fuse(mi: &[f64], vi: &[f64], mg: &[f64], vg: &[f64], alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let blend = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
            .collect::<Vec<_>>()
    };
    (blend(mi, mg), blend(vi, vg))
}

/// Soft-shrinkage settings: threshold `kappa·s` with `s` the sampling-noise
/// scale of an `n`-sample statistic.
#[derive(Copy, Clone, Debug)]
pub struct ShrinkParams {
    pub kappa: f64,
    pub n: usize,
}

/// `sign(d)·max(|d| − t, 0)`.
pub fn soft_shrink(d: f64, threshold: f64) -> f64 {
    d.signum() * (d.abs() - threshold).max(0.0)
}

#[allow(clippy::type_complexity)]
fn iabn_with_coefficients(
    mean_ins: &[f64],
    var_ins: &[f64],
    mean_run: &[f64],
    var_run: &[f64],
    p: ShrinkParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let w = mean_run.len();
    if mean_ins.len() != w || var_ins.len() != w || var_run.len() != w {
        return Err(Error::shape("IABN statistics widths"));
    }
    if var_run.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("IABN running variance must be positive"));
    }
    if p.n == 0 {
        return Err(Error::invalid("IABN sample count must be positive"));
    }
    let n = p.n as f64;
    let mut mean = Vec::with_capacity(w);
    let mut mean_coeff = Vec::with_capacity(w);
    let mut var = Vec::with_capacity(w);
    let mut var_coeff = Vec::with_capacity(w);
    for k in 0..w {
        let s_mean = (var_run[k] / n).sqrt();
        let d = mean_ins[k] - mean_run[k];
        let t = p.kappa * s_mean;
        mean.push(mean_run[k] + soft_shrink(d, t));
        mean_coeff.push(if d.abs() > t { 1.0 } else { 0.0 });

        // Standard error of a Gaussian sample variance.
        let s_var = if p.n > 1 {
            var_run[k] * (2.0 / (n - 1.0)).sqrt()
        } else {
            f64::INFINITY
        };
        let dv = var_ins[k] - var_run[k];
        let tv = p.kappa * s_var;
        var.push(var_run[k] + soft_shrink(dv, tv));
        var_coeff.push(if dv.abs() > tv { 1.0 } else { 0.0 });
    }
    Ok((mean, mean_coeff, var, var_coeff))
}

/// Instance-aware statistics: the running statistics moved toward the
/// instance statistics by the soft-shrunk deviation. Deviations within
/// `kappa` sampling-noise units leave the running value unchanged; the
/// variance branch uses the same rule with the standard error of a sample
/// variance.
pub fn iabn_statistics(
    mean_ins: &[f64],
    var_ins: &[f64],
    mean_run: &[f64],
    var_run: &[f64],
    params: ShrinkParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if var_ins.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("IABN instance variance must be positive"));
    }
    let (mean, _, var, _) = iabn_with_coefficients(mean_ins, var_ins, mean_run, var_run, params)?;
    Ok((mean, var))
}

/// Robust statistics: `α·instance + (1 − α)·global` for mean and variance.
pub fn rbn_statistics(
    mean_ins: &[f64],
    var_ins: &[f64],
    mean_glob: &[f64],
    var_glob: &[f64],
    alpha: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("fusion weight {alpha} outside [0, 1]")));
    }
    let w = mean_glob.len();
    if mean_ins.len() != w || var_ins.len() != w || var_glob.len() != w {
        return Err(Error::shape("RBN statistics widths"));
    }
    if var_ins.iter().chain(var_glob).any(|&v| v <= 0.0) {
        return Err(Error::invalid("RBN variances must be positive"));
    }
    Ok(fuse(mean_ins, var_ins, mean_glob, var_glob, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shrinkage_examples() {
        let p = ShrinkParams { kappa: 1.0, n: 16 };
        // κ·s = 1·√(16/16) = 1
        let (m, _) = iabn_statistics(&[0.0], &[16.0], &[0.0], &[16.0], p).unwrap();
        assert_eq!(m, vec![0.0]);
        let (m, _) = iabn_statistics(&[0.5], &[16.0], &[0.0], &[16.0], p).unwrap();
        assert_eq!(m, vec![0.0]);
        let (m, _) = iabn_statistics(&[3.0], &[16.0], &[0.0], &[16.0], p).unwrap();
        assert!((m[0] - 2.0).abs() < 1e-12);
        let (m, _) = iabn_statistics(&[-3.0], &[16.0], &[0.0], &[16.0], p).unwrap();
        assert!((m[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_kappa_returns_instance_statistics() {
        let p = ShrinkParams { kappa: 0.0, n: 8 };
        let (m, v) = iabn_statistics(&[1.5, -0.2], &[0.3, 2.0], &[0.0, 0.0], &[1.0, 1.0], p).unwrap();
        assert!((m[0] - 1.5).abs() < 1e-15 && (m[1] + 0.2).abs() < 1e-15);
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn iabn_rejects_nonpositive_variance() {
        let p = ShrinkParams { kappa: 1.0, n: 4 };
        assert!(iabn_statistics(&[0.0], &[0.0], &[0.0], &[1.0], p).is_err());
        assert!(iabn_statistics(&[0.0], &[1.0], &[0.0], &[-1.0], p).is_err());
    }

    #[test]
    fn rbn_examples() {
        let (m, v) = rbn_statistics(&[2.0], &[3.0], &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!((m[0], v[0]), (0.0, 1.0));
        let (m, v) = rbn_statistics(&[2.0], &[3.0], &[0.0], &[1.0], 1.0).unwrap();
        assert_eq!((m[0], v[0]), (2.0, 3.0));
        let (m, _) = rbn_statistics(&[2.0], &[3.0], &[0.0], &[1.0], 0.5).unwrap();
        assert_eq!(m[0], 1.0);
        assert!(rbn_statistics(&[2.0], &[3.0], &[0.0], &[1.0], 1.5).is_err());
        assert!(rbn_statistics(&[2.0], &[0.0], &[0.0], &[1.0], 0.5).is_err());
    }

    #[test]
    fn layer_norm_has_no_running_stats() {
        let ln = NormLayer::new(NormKind::LayerNorm, 4);
        assert!(ln.running_mean.is_empty() && ln.running_var.is_empty());
        let bn = NormLayer::new(NormKind::BatchNorm, 4);
        assert_eq!(bn.running_var, vec![1.0; 4]);
    }
}
