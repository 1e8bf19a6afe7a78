use crate::adapters::common::{check_lr, gaussian_augment, sgd};
use crate::adapters::cotta::TeacherStudent;
use crate::adapters::memory::{CategoryBalancedMemory, MemoryEntry};
use crate::adapters::{Adapter, Method, RottaConfig};
use crate::error::{Error, Result};
use crate::model::{Model, NormKind, ParamSelector, StatsMode};
use crate::numcore::loss::soft_cross_entropy;
use crate::numcore::{entropy, Matrix, Rng};

/// Robust continual adaptation: robust batch norm, a category-balanced
/// memory of confident fresh samples, and a teacher–student update on the
/// memory weighted by sample timeliness.
#[derive(Clone, Debug)]
pub struct Rotta {
    pair: TeacherStudent,
    memory: CategoryBalancedMemory,
    lr: f64,
    update_every: usize,
    tau_age: f64,
    noise_std: f64,
    predict_after_update: bool,
    rng: Rng,
    batches: usize,
}

/// Timeliness weights `exp(−age/τ)`, normalized to sum to one.
pub(crate) fn timeliness(ages: &[u64], tau: f64) -> Vec<f64> {
    let raw: Vec<f64> = ages.iter().map(|&a| (-(a as f64) / tau).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|r| r / sum).collect()
}

impl Rotta {
    pub fn new(mut model: Model, cfg: &RottaConfig, lr: f64, predict_after_update: bool, rng: Rng) -> Result<Self> {
        check_lr(lr)?;
        if model.norm_kind() != Some(NormKind::Rbn) {
            return Err(Error::invalid("RoTTA needs a model with robust batch norm"));
        }
        if cfg.update_every == 0 || !(cfg.tau_age > 0.0) || !(cfg.noise_std >= 0.0) {
            return Err(Error::invalid(format!("RoTTA config {cfg:?}")));
        }
        if !(0.0..=1.0).contains(&cfg.alpha) || !(0.0..=1.0).contains(&cfg.momentum) {
            return Err(Error::invalid(format!("RoTTA norm weights {cfg:?}")));
        }
        for layer in model.norm_layers_mut() {
            layer.fuse_alpha = cfg.alpha;
            layer.momentum = cfg.momentum;
        }
        let memory = CategoryBalancedMemory::new(cfg.capacity, model.classes());
        Ok(Rotta {
            pair: TeacherStudent::new(model, ParamSelector::NormAffineOnly, cfg.ema)?,
            memory,
            lr,
            update_every: cfg.update_every,
            tau_age: cfg.tau_age,
            noise_std: cfg.noise_std,
            predict_after_update,
            rng,
            batches: 0,
        })
    }

    pub fn memory(&self) -> &CategoryBalancedMemory {
        &self.memory
    }

    pub fn pair(&self) -> &TeacherStudent {
        &self.pair
    }
}

impl Adapter for Rotta {
    fn method(&self) -> Method {
        Method::Rotta
    }

    fn model(&self) -> &Model {
        &self.pair.teacher
    }

    fn step(&mut self, x: &Matrix) -> Result<Matrix> {
        self.batches += 1;
        let probs = self.pair.teacher.forward(x, StatsMode::Train)?.probs()?;
        let h = entropy(&probs)?;
        for (i, (class, hi)) in probs.argmax_rows().into_iter().zip(h).enumerate() {
            self.memory.add(MemoryEntry {
                x: x.row(i).to_vec(),
                class,
                entropy: hi,
                age: 0,
            })?;
        }
        if self.batches.is_multiple_of(self.update_every) && !self.memory.is_empty() {
            let entries = self.memory.entries();
            let ages: Vec<u64> = entries.iter().map(|e| e.age).collect();
            let xm = self.memory.features()?;
            let w = timeliness(&ages, self.tau_age);
            let xa = gaussian_augment(&xm, self.noise_std, &mut self.rng);
            let targets = self.pair.teacher.forward_detached(&xa, StatsMode::Eval)?.probs()?;
            let fwd = self.pair.student.forward(&xm, StatsMode::Train)?;
            let loss = soft_cross_entropy(&fwd.logits, &targets, &w)?;
            let g = fwd.grad(&loss, &self.pair.group.slots)?;
            sgd(&mut self.pair.student, &g, self.lr, self.batches)?;
            self.pair.update_teacher()?;
            if self.predict_after_update {
                return self.pair.teacher.forward_detached(x, StatsMode::Train)?.probs();
            }
        }
        Ok(probs)
    }
}
