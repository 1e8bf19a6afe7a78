//! Reverse-mode gradients for the fixed layer vocabulary the models use:
//! affine maps, standardization (row or column statistics), per-feature
//! scale/shift, and ReLU.
//!
//! The forward pass records each primitive on a [`GradTape`]; [`grad`] walks
//! the tape backwards from a loss's logit gradient and returns gradients for
//! the requested parameter slots only.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::loss::LossGrad;
use crate::numcore::matrix::Matrix;

/// Identifies one parameter tensor of a model.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamId {
    /// Affine weight of encoder block `i` (in × out).
    Weight(usize),
    /// Affine bias of encoder block `i`.
    Bias(usize),
    /// Normalization scale of block `i`.
    Gamma(usize),
    /// Normalization shift of block `i`.
    Beta(usize),
    HeadWeight,
    HeadBias,
}

impl ParamId {
    pub fn is_norm_affine(self) -> bool {
        matches!(self, ParamId::Gamma(_) | ParamId::Beta(_))
    }

    pub fn is_head(self) -> bool {
        matches!(self, ParamId::HeadWeight | ParamId::HeadBias)
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Weight(i) => write!(f, "block{i}.weight"),
            ParamId::Bias(i) => write!(f, "block{i}.bias"),
            ParamId::Gamma(i) => write!(f, "block{i}.gamma"),
            ParamId::Beta(i) => write!(f, "block{i}.beta"),
            ParamId::HeadWeight => f.write_str("head.weight"),
            ParamId::HeadBias => f.write_str("head.bias"),
        }
    }
}

/// Which axis the standardization statistics are taken over.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum StatAxis {
    /// Per-feature statistics over the batch (BatchNorm family).
    Column,
    /// Per-sample statistics over features (LayerNorm).
    Row,
}

/// Statistics a standardization used, expressed relative to the plain
/// batch (or row) statistics so the backward pass can differentiate through
/// them: `mean = a·batch_mean + const`, `var = b·batch_var + const`.
#[derive(Clone, Debug)]
pub struct StandardizeStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub mean_coeff: Vec<f64>,
    pub var_coeff: Vec<f64>,
    pub eps: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Affine {
        input: Matrix,
        weight: Matrix,
        weight_slot: ParamId,
        bias_slot: ParamId,
    },
    Standardize {
        axis: StatAxis,
        centered: Matrix,
        centered_batch: Matrix,
        inv_std: Vec<f64>,
        mean_coeff: Vec<f64>,
        var_coeff: Vec<f64>,
    },
    ScaleShift {
        normalized: Matrix,
        gamma: Vec<f64>,
        gamma_slot: ParamId,
        beta_slot: ParamId,
    },
    Relu {
        output: Matrix,
    },
}

/// Record of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct GradTape {
    ops: Vec<Op>,
}

/// Gradients keyed by parameter slot, each shaped like its parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    slots: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        self.slots.get_mut(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Matrix) {
        self.slots.insert(id, g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.slots.iter().map(|(&k, v)| (k, v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Global L2 norm over all slots.
    pub fn norm(&self) -> f64 {
        self.slots
            .values()
            .flat_map(|m| m.as_slice())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.values().all(Matrix::is_finite)
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    /// Parameter slots touched by the recorded ops.
    pub fn slots(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for op in &self.ops {
            match op {
                Op::Affine {
                    weight_slot,
                    bias_slot,
                    ..
                } => out.extend([*weight_slot, *bias_slot]),
                Op::ScaleShift {
                    gamma_slot,
                    beta_slot,
                    ..
                } => out.extend([*gamma_slot, *beta_slot]),
                _ => {}
            }
        }
        out
    }

    /// `x·W + b`.
    pub fn affine(
        &mut self,
        x: &Matrix,
        weight: &Matrix,
        bias: &Matrix,
        weight_slot: ParamId,
        bias_slot: ParamId,
    ) -> Result<Matrix> {
        let mut out = x.matmul(weight)?;
        out.add_row_broadcast(bias.as_slice())?;
        self.ops.push(Op::Affine {
            input: x.clone(),
            weight: weight.clone(),
            weight_slot,
            bias_slot,
        });
        Ok(out)
    }

    /// `(h − mean)/√(var + eps)` along `axis`.
    pub fn standardize(&mut self, h: &Matrix, axis: StatAxis, stats: StandardizeStats) -> Result<Matrix> {
        let groups = match axis {
            StatAxis::Column => h.cols(),
            StatAxis::Row => h.rows(),
        };
        if stats.mean.len() != groups
            || stats.var.len() != groups
            || stats.batch_mean.len() != groups
            || stats.mean_coeff.len() != groups
            || stats.var_coeff.len() != groups
        {
            return Err(Error::shape("standardization statistics"));
        }
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let mut centered = h.clone();
        let mut centered_batch = h.clone();
        let mut out = h.clone();
        for i in 0..h.rows() {
            for j in 0..h.cols() {
                let g = if axis == StatAxis::Column { j } else { i };
                let v = h[(i, j)];
                centered[(i, j)] = v - stats.mean[g];
                centered_batch[(i, j)] = v - stats.batch_mean[g];
                out[(i, j)] = centered[(i, j)] * inv_std[g];
            }
        }
        self.ops.push(Op::Standardize {
            axis,
            centered,
            centered_batch,
            inv_std,
            mean_coeff: stats.mean_coeff,
            var_coeff: stats.var_coeff,
        });
        Ok(out)
    }

    /// `γ ⊙ x + β` per feature.
    pub fn scale_shift(
        &mut self,
        x: &Matrix,
        gamma: &Matrix,
        beta: &Matrix,
        gamma_slot: ParamId,
        beta_slot: ParamId,
    ) -> Result<Matrix> {
        if gamma.as_slice().len() != x.cols() || beta.as_slice().len() != x.cols() {
            return Err(Error::shape("scale/shift width"));
        }
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (v, (g, b)) in out
                .row_mut(i)
                .iter_mut()
                .zip(gamma.as_slice().iter().zip(beta.as_slice()))
            {
                *v = *v * g + b;
            }
        }
        self.ops.push(Op::ScaleShift {
            normalized: x.clone(),
            gamma: gamma.as_slice().to_vec(),
            gamma_slot,
            beta_slot,
        });
        Ok(out)
    }

    pub fn relu(&mut self, x: &Matrix) -> Matrix {
        let out = x.map(|v| v.max(0.0));
        self.ops.push(Op::Relu { output: out.clone() });
        out
    }
}

/// `∂loss/∂slot` for every slot in `wrt`.
pub fn grad(tape: &GradTape, loss: &LossGrad, wrt: &[ParamId]) -> Result<Gradients> {
    backward(tape, &loss.dlogits, wrt)
}

/// Backpropagates `dout` (gradient w.r.t. the tape's final output).
pub fn backward(tape: &GradTape, dout: &Matrix, wrt: &[ParamId]) -> Result<Gradients> {
    let recorded = tape.slots();
    for id in wrt {
        if !recorded.contains(id) {
            return Err(Error::UnknownSlot(id.to_string()));
        }
    }
    let wanted = |id: &ParamId| wrt.contains(id);
    let mut out = Gradients::default();
    let mut g = dout.clone();
    // Ops before the first requested slot need no input gradient.
    let first_needed = tape
        .ops
        .iter()
        .position(|op| match op {
            Op::Affine {
                weight_slot,
                bias_slot,
                ..
            } => wanted(weight_slot) || wanted(bias_slot),
            Op::ScaleShift {
                gamma_slot,
                beta_slot,
                ..
            } => wanted(gamma_slot) || wanted(beta_slot),
            _ => false,
        })
        .unwrap_or(tape.ops.len());

    for (idx, op) in tape.ops.iter().enumerate().rev() {
        if idx < first_needed {
            break;
        }
        let need_input = idx > first_needed;
        match op {
            Op::Affine {
                input,
                weight,
                weight_slot,
                bias_slot,
            } => {
                if wanted(weight_slot) {
                    out.insert(*weight_slot, input.t_matmul(&g)?);
                }
                if wanted(bias_slot) {
                    out.insert(*bias_slot, Matrix::row_vector(&g.column_sums()));
                }
                if need_input {
                    g = g.matmul_t(weight)?;
                }
            }
            Op::ScaleShift {
                normalized,
                gamma,
                gamma_slot,
                beta_slot,
            } => {
                if wanted(gamma_slot) {
                    let dg = normalized.zip_with(&g, |x, d| x * d)?.column_sums();
                    out.insert(*gamma_slot, Matrix::row_vector(&dg));
                }
                if wanted(beta_slot) {
                    out.insert(*beta_slot, Matrix::row_vector(&g.column_sums()));
                }
                if need_input {
                    for i in 0..g.rows() {
                        for (d, gm) in g.row_mut(i).iter_mut().zip(gamma) {
                            *d *= gm;
                        }
                    }
                }
            }
            Op::Relu { output } => {
                if need_input {
                    g = g.zip_with(output, |d, y| if y > 0.0 { d } else { 0.0 })?;
                }
            }
            Op::Standardize {
                axis,
                centered,
                centered_batch,
                inv_std,
                mean_coeff,
                var_coeff,
            } => {
                if need_input {
                    g = standardize_backward(*axis, &g, centered, centered_batch, inv_std, mean_coeff, var_coeff);
                }
            }
        }
    }
    for id in wrt {
        if out.get(*id).is_none() {
            return Err(Error::UnknownSlot(id.to_string()));
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(out)
}

/// For one statistics group of size n with x̂ = (h − μ)s, μ = a·μ_b + c,
/// σ² = b·σ²_b + c′ and s = (σ² + eps)^(−1/2):
/// `dh = s·dx̂ + a·dμ/n + b·dσ²·2(h − μ_b)/n` with
/// `dμ = −s·Σdx̂` and `dσ² = −½s³·Σdx̂(h − μ)`.
fn standardize_backward(
    axis: StatAxis,
    dxhat: &Matrix,
    centered: &Matrix,
    centered_batch: &Matrix,
    inv_std: &[f64],
    mean_coeff: &[f64],
    var_coeff: &[f64],
) -> Matrix {
    let (rows, cols) = dxhat.shape();
    let groups = inv_std.len();
    let n = match axis {
        StatAxis::Column => rows,
        StatAxis::Row => cols,
    } as f64;
    let group_of = |i: usize, j: usize| if axis == StatAxis::Column { j } else { i };

    let mut dmean = vec![0.0; groups];
    let mut dvar = vec![0.0; groups];
    for i in 0..rows {
        for j in 0..cols {
            let k = group_of(i, j);
            let d = dxhat[(i, j)];
            dmean[k] += d;
            dvar[k] += d * centered[(i, j)];
        }
    }
    for k in 0..groups {
        let s = inv_std[k];
        dmean[k] *= -s;
        dvar[k] *= -0.5 * s * s * s;
    }
    let mut dh = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let k = group_of(i, j);
            dh[(i, j)] = dxhat[(i, j)] * inv_std[k]
                + mean_coeff[k] * dmean[k] / n
                + var_coeff[k] * dvar[k] * 2.0 * centered_batch[(i, j)] / n;
        }
    }
    dh
}
