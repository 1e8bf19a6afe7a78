use crate::adapters::common::{check_lr, entropy_margin, restore_slots, sgd};
use crate::adapters::{Adapter, Method, SarConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup, ParamSelector, StatsMode};
use crate::numcore::loss::masked_entropy;
use crate::numcore::{entropy, Matrix};

/// Sharpness-aware entropy minimization on reliable (low-entropy) samples.
#[derive(Clone, Debug)]
pub struct Sar {
    model: Model,
    group: ParamGroup,
    lr: f64,
    rho: f64,
    e0: f64,
    predict_after_update: bool,
    steps: usize,
}

impl Sar {
    pub fn new(model: Model, cfg: &SarConfig, lr: f64, predict_after_update: bool) -> Result<Self> {
        check_lr(lr)?;
        if !(cfg.rho >= 0.0) {
            return Err(Error::invalid(format!("SAR radius {}", cfg.rho)));
        }
        let group = ParamGroup::resolve(ParamSelector::NormAffineOnly, &model);
        Ok(Sar {
            e0: entropy_margin(cfg.e0_factor, cfg.e0, model.classes()),
            model,
            group,
            lr,
            rho: cfg.rho,
            predict_after_update,
            steps: 0,
        })
    }

    pub fn margin(&self) -> f64 {
        self.e0
    }
}

impl Adapter for Sar {
    fn method(&self) -> Method {
        Method::Sar
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn step(&mut self, x: &Matrix) -> Result<Matrix> {
        self.steps += 1;
        let fwd = self.model.forward(x, StatsMode::Train)?;
        let probs = fwd.probs()?;
        let mask: Vec<bool> = entropy(&probs)?.into_iter().map(|h| h < self.e0).collect();
        if mask.iter().any(|&m| m) {
            let loss = masked_entropy(&fwd.logits, &mask)?;
            let g = fwd.grad(&loss, &self.group.slots)?;
            let norm = g.norm();
            if self.rho == 0.0 || norm == 0.0 {
                sgd(&mut self.model, &g, self.lr, self.steps)?;
            } else {
                let saved = self.model.snapshot();
                self.model.perturb(&g, self.rho / norm)?;
                let sharp = self
                    .model
                    .forward_detached(x, StatsMode::Train)
                    .and_then(|f| {
                        let l = masked_entropy(&f.logits, &mask)?;
                        f.grad(&l, &self.group.slots)
                    });
                restore_slots(&mut self.model, &saved, &self.group.slots)?;
                sgd(&mut self.model, &sharp?, self.lr, self.steps)?;
            }
        }
        if self.predict_after_update {
            return self.model.forward_detached(x, StatsMode::Train)?.probs();
        }
        Ok(probs)
    }
}
