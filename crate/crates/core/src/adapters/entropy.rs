use crate::adapters::common::{check_lr, entropy_margin, fisher_diagonal, sgd};
use crate::adapters::{Adapter, EataConfig, Method, RedundancyRule};
use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup, ParamImage, ParamSelector, StatsMode};
use crate::numcore::loss::masked_entropy;
use crate::numcore::{cosine, entropy, Gradients, Matrix, ParamId};
use crate::shiftlab::Dataset;

/// Entropy minimization over the normalization affine parameters.
#[derive(Clone, Debug)]
pub struct Tent {
    model: Model,
    group: ParamGroup,
    lr: f64,
    threshold: Option<f64>,
    predict_after_update: bool,
    steps: usize,
}

impl Tent {
    pub fn new(model: Model, lr: f64, threshold: Option<f64>, predict_after_update: bool) -> Result<Self> {
        check_lr(lr)?;
        let group = ParamGroup::resolve(ParamSelector::NormAffineOnly, &model);
        Ok(Tent {
            model,
            group,
            lr,
            threshold,
            predict_after_update,
            steps: 0,
        })
    }
}

impl Adapter for Tent {
    fn method(&self) -> Method {
        Method::Tent
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn step(&mut self, x: &Matrix) -> Result<Matrix> {
        self.steps += 1;
        let fwd = self.model.forward(x, StatsMode::Train)?;
        let probs = fwd.probs()?;
        let mask: Vec<bool> = match self.threshold {
            Some(t) => entropy(&probs)?.into_iter().map(|h| h < t).collect(),
            None => vec![true; x.rows()],
        };
        if mask.iter().any(|&m| m) {
            let loss = masked_entropy(&fwd.logits, &mask)?;
            let g = fwd.grad(&loss, &self.group.slots)?;
            sgd(&mut self.model, &g, self.lr, self.steps)?;
        }
        if self.predict_after_update {
            return self.model.forward_detached(x, StatsMode::Train)?.probs();
        }
        Ok(probs)
    }
}

/// Adaptation state EATA carries between batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EataState {
    /// Moving average of admitted predictions; `None` until the first
    /// admitted sample.
    pub mean_prediction: Option<Vec<f64>>,
    pub admitted: usize,
    pub seen: usize,
}

/// Entropy minimization on low-entropy, non-redundant samples with a
/// Fisher-weighted anchor to the source parameters.
#[derive(Clone, Debug)]
pub struct Eata {
    model: Model,
    group: ParamGroup,
    lr: f64,
    e0: f64,
    epsilon: f64,
    rule: RedundancyRule,
    lambda: f64,
    momentum: f64,
    fisher: Gradients,
    source: ParamImage,
    state: EataState,
    predict_after_update: bool,
    steps: usize,
}

impl Eata {
    pub fn new(model: Model, cfg: &EataConfig, lr: f64, val: &Dataset, predict_after_update: bool) -> Result<Self> {
        check_lr(lr)?;
        if !(0.0..=1.0).contains(&cfg.pbar_momentum) {
            return Err(Error::invalid(format!("EATA moving-average weight {}", cfg.pbar_momentum)));
        }
        if cfg.fisher_lambda < 0.0 {
            return Err(Error::invalid(format!("Fisher weight {}", cfg.fisher_lambda)));
        }
        let source = super::common::require_source(&model)?;
        let group = ParamGroup::resolve(ParamSelector::NormAffineOnly, &model);
        let fisher = fisher_diagonal(&model, val, &group.slots, cfg.fisher_batch)?;
        Ok(Eata {
            e0: entropy_margin(cfg.e0_factor, cfg.e0, model.classes()),
            model,
            group,
            lr,
            epsilon: cfg.epsilon,
            rule: cfg.redundancy,
            lambda: cfg.fisher_lambda,
            momentum: cfg.pbar_momentum,
            fisher,
            source,
            state: EataState {
                mean_prediction: None,
                admitted: 0,
                seen: 0,
            },
            predict_after_update,
            steps: 0,
        })
    }

    pub fn state(&self) -> &EataState {
        &self.state
    }

    pub fn fisher(&self) -> &Gradients {
        &self.fisher
    }

    /// Which rows of `probs` pass the entropy and redundancy filters.
    pub fn admission_mask(&self, probs: &Matrix) -> Result<Vec<bool>> {
        let h = entropy(probs)?;
        let mut mask = Vec::with_capacity(h.len());
        for (i, hi) in h.into_iter().enumerate() {
            let mut ok = hi < self.e0;
            if ok {
                if let Some(pbar) = &self.state.mean_prediction {
                    let c = cosine(probs.row(i), pbar)?;
                    ok = match self.rule {
                        RedundancyRule::Literal => c < self.epsilon,
                        RedundancyRule::Complement => c < 1.0 - self.epsilon,
                    };
                }
            }
            mask.push(ok);
        }
        Ok(mask)
    }

    fn add_anchor(&self, g: &mut Gradients) -> Result<()> {
        if self.lambda == 0.0 {
            return Ok(());
        }
        let (_, anchor) = fisher_anchor(&self.model, &self.fisher, &self.source, self.lambda, &self.group.slots)?;
        for (id, a) in anchor.iter() {
            let gm = g.get_mut(id).ok_or_else(|| Error::UnknownSlot(id.to_string()))?;
            for (d, v) in gm.as_mut_slice().iter_mut().zip(a.as_slice()) {
                *d += v;
            }
        }
        Ok(())
    }
}

/// `λ·Σ ω(θ − θ₀)²` over `slots` and its gradient `2λω(θ − θ₀)`.
pub fn fisher_anchor(
    model: &Model,
    fisher: &Gradients,
    source: &ParamImage,
    lambda: f64,
    slots: &[ParamId],
) -> Result<(f64, Gradients)> {
    let mut value = 0.0;
    let mut grads = Gradients::default();
    for &id in slots {
        let missing = || Error::UnknownSlot(id.to_string());
        let theta = model.param(id).ok_or_else(missing)?;
        let src = source.get(id).ok_or_else(missing)?;
        let w = fisher.get(id).ok_or_else(missing)?;
        let mut g = Matrix::zeros(theta.rows(), theta.cols());
        for (k, d) in g.as_mut_slice().iter_mut().enumerate() {
            let diff = theta.as_slice()[k] - src.as_slice()[k];
            value += lambda * w.as_slice()[k] * diff * diff;
            *d = 2.0 * lambda * w.as_slice()[k] * diff;
        }
        grads.insert(id, g);
    }
    Ok((value, grads))
}

impl Adapter for Eata {
    fn method(&self) -> Method {
        Method::Eata
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn step(&mut self, x: &Matrix) -> Result<Matrix> {
        self.steps += 1;
        let fwd = self.model.forward(x, StatsMode::Train)?;
        let probs = fwd.probs()?;
        let mask = self.admission_mask(&probs)?;
        let admitted: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        self.state.seen += x.rows();
        self.state.admitted += admitted.len();
        if !admitted.is_empty() {
            let batch_mean = probs.select_rows(&admitted).column_means();
            self.state.mean_prediction = Some(match self.state.mean_prediction.take() {
                None => batch_mean,
                Some(prev) => prev
                    .iter()
                    .zip(&batch_mean)
                    .map(|(p, b)| self.momentum * p + (1.0 - self.momentum) * b)
                    .collect(),
            });
            let loss = masked_entropy(&fwd.logits, &mask)?;
            let mut g = fwd.grad(&loss, &self.group.slots)?;
            self.add_anchor(&mut g)?;
            sgd(&mut self.model, &g, self.lr, self.steps)?;
        }
        if self.predict_after_update {
            return self.model.forward_detached(x, StatsMode::Train)?.probs();
        }
        Ok(probs)
    }
}
