use crate::adapters::common::{check_lr, sgd};
use crate::adapters::memory::{MemoryEntry, PredictionBalancedReservoir};
use crate::adapters::{Adapter, Method, NoteConfig};
use crate::error::{Error, Result};
use crate::model::{Model, NormKind, ParamGroup, ParamSelector, StatsMode};
use crate::numcore::loss::mean_entropy;
use crate::numcore::{entropy, Matrix, Rng};

/// Instance-aware normalization plus a prediction-balanced memory that the
/// normalization affine parameters are periodically fitted to by entropy
/// minimization.
#[derive(Clone, Debug)]
pub struct Note {
    model: Model,
    group: ParamGroup,
    memory: PredictionBalancedReservoir,
    lr: f64,
    update_every: usize,
    predict_after_update: bool,
    rng: Rng,
    batches: usize,
    updates: usize,
}

impl Note {
    pub fn new(mut model: Model, cfg: &NoteConfig, lr: f64, predict_after_update: bool, rng: Rng) -> Result<Self> {
        check_lr(lr)?;
        if model.norm_kind() != Some(NormKind::Iabn) {
            return Err(Error::invalid("NOTE needs a model with instance-aware batch norm"));
        }
        if cfg.update_every == 0 {
            return Err(Error::invalid("NOTE update interval must be positive"));
        }
        for layer in model.norm_layers_mut() {
            layer.shrink_kappa = cfg.kappa;
        }
        let group = ParamGroup::resolve(ParamSelector::NormAffineOnly, &model);
        let memory = PredictionBalancedReservoir::new(cfg.capacity, model.classes());
        Ok(Note {
            model,
            group,
            memory,
            lr,
            update_every: cfg.update_every,
            predict_after_update,
            rng,
            batches: 0,
            updates: 0,
        })
    }

    pub fn memory(&self) -> &PredictionBalancedReservoir {
        &self.memory
    }

    pub fn updates(&self) -> usize {
        self.updates
    }
}

impl Adapter for Note {
    fn method(&self) -> Method {
        Method::Note
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn step(&mut self, x: &Matrix) -> Result<Matrix> {
        self.batches += 1;
        let probs = self.model.infer(x)?.probs()?;
        let h = entropy(&probs)?;
        for (i, (class, hi)) in probs.argmax_rows().into_iter().zip(h).enumerate() {
            let entry = MemoryEntry {
                x: x.row(i).to_vec(),
                class,
                entropy: hi,
                age: 0,
            };
            self.memory.add(entry, &mut self.rng)?;
        }
        if self.batches.is_multiple_of(self.update_every) && !self.memory.is_empty() {
            self.updates += 1;
            let xm = self.memory.features()?;
            let fwd = self.model.forward(&xm, StatsMode::Train)?;
            let loss = mean_entropy(&fwd.logits)?;
            let g = fwd.grad(&loss, &self.group.slots)?;
            sgd(&mut self.model, &g, self.lr, self.batches)?;
            if self.predict_after_update {
                return self.model.infer(x)?.probs();
            }
        }
        Ok(probs)
    }
}
