//! Streaming test-time adaptation policies behind one interface: each
//! [`Adapter::step`] receives an unlabeled batch, may update internal state
//! or model parameters, and returns class probabilities for the batch.

mod baseline;
mod common;
mod cotta;
mod entropy;
mod memory;
mod note;
mod rotta;
mod sar;
mod shot;
mod t3a;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, NormKind};
use crate::numcore::{Matrix, Rng};
use crate::shiftlab::Dataset;

pub use baseline::Baseline;
pub use common::{fisher_diagonal, gaussian_augment};
pub use cotta::{Cotta, TeacherStudent};
pub use entropy::{fisher_anchor, Eata, EataState, Tent};
pub use memory::{CategoryBalancedMemory, MemoryEntry, PredictionBalancedReservoir};
pub use note::Note;
pub use rotta::Rotta;
pub use sar::Sar;
pub use shot::{centroid_pseudo_labels, Shot};
pub use t3a::{T3a, T3aState};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Tent,
    Eata,
    Sar,
    Shot,
    T3a,
    Note,
    Cotta,
    Rotta,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Baseline,
    EntropyMinimization,
    FeatureAlignment,
    Prototype,
    Continual,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Baseline => "baseline",
            Family::EntropyMinimization => "entropy minimization",
            Family::FeatureAlignment => "feature alignment",
            Family::Prototype => "prototype adjustment",
            Family::Continual => "continual adaptation",
        })
    }
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Baseline,
        Method::Tent,
        Method::Eata,
        Method::Sar,
        Method::Shot,
        Method::T3a,
        Method::Note,
        Method::Cotta,
        Method::Rotta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Tent => "tent",
            Method::Eata => "eata",
            Method::Sar => "sar",
            Method::Shot => "shot",
            Method::T3a => "t3a",
            Method::Note => "note",
            Method::Cotta => "cotta",
            Method::Rotta => "rotta",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Method::Baseline => Family::Baseline,
            Method::Tent | Method::Eata | Method::Sar => Family::EntropyMinimization,
            Method::Shot => Family::FeatureAlignment,
            Method::T3a => Family::Prototype,
            Method::Note | Method::Cotta | Method::Rotta => Family::Continual,
        }
    }

    /// Normalization the method's encoder runs with by default.
    pub fn default_norm(self) -> NormKind {
        match self {
            Method::Note => NormKind::Iabn,
            Method::Rotta => NormKind::Rbn,
            _ => NormKind::LayerNorm,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// One streaming adaptation policy.
pub trait Adapter: Send {
    fn method(&self) -> Method;

    /// The network whose predictions are reported (the teacher for
    /// teacher–student methods).
    fn model(&self) -> &Model;

    /// Consumes one unlabeled batch and returns its class probabilities.
    fn step(&mut self, x: &Matrix) -> Result<Matrix>;
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedundancyRule {
    /// Admit a sample when `cos(p, p̄) < ε`.
    Literal,
    /// Admit a sample when `cos(p, p̄) < 1 − ε`, skipping near-duplicates of
    /// the running mean prediction.
    Complement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct TentConfig {
    pub lr: Option<f64>,
    /// Only samples with entropy below this value contribute.
    pub entropy_threshold: Option<f64>,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EataConfig {
    pub lr: Option<f64>,
    /// E₀ as a fraction of ln C.
    pub e0_factor: f64,
    /// Absolute E₀, overriding `e0_factor`.
    pub e0: Option<f64>,
    pub epsilon: f64,
    pub redundancy: RedundancyRule,
    pub fisher_lambda: f64,
    /// Weight of the previous p̄ in its moving average.
    pub pbar_momentum: f64,
    pub fisher_batch: usize,
}

impl Default for EataConfig {
    fn default() -> Self {
        EataConfig {
            lr: None,
            e0_factor: 0.4,
            e0: None,
            epsilon: 0.05,
            redundancy: RedundancyRule::Literal,
            fisher_lambda: 1.0,
            pbar_momentum: 0.9,
            fisher_batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SarConfig {
    pub lr: Option<f64>,
    pub rho: f64,
    pub e0_factor: f64,
    pub e0: Option<f64>,
}

impl Default for SarConfig {
    fn default() -> Self {
        SarConfig {
            lr: None,
            rho: 0.05,
            e0_factor: 0.4,
            e0: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShotConfig {
    pub lr: Option<f64>,
    /// Weight of the pseudo-label cross-entropy.
    pub beta: f64,
}

impl Default for ShotConfig {
    fn default() -> Self {
        ShotConfig { lr: None, beta: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct T3aConfig {
    /// Supports kept per class.
    pub support_cap: usize,
}

impl Default for T3aConfig {
    fn default() -> Self {
        T3aConfig { support_cap: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoteConfig {
    pub lr: Option<f64>,
    pub capacity: usize,
    /// Batches between memory updates.
    pub update_every: usize,
    pub kappa: f64,
}

impl Default for NoteConfig {
    fn default() -> Self {
        NoteConfig {
            lr: None,
            capacity: 64,
            update_every: 4,
            kappa: crate::model::DEFAULT_IABN_KAPPA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CottaConfig {
    pub lr: Option<f64>,
    pub augmentations: usize,
    pub noise_std: f64,
    pub restore_prob: f64,
    pub ema: f64,
}

impl Default for CottaConfig {
    fn default() -> Self {
        CottaConfig {
            lr: None,
            augmentations: 4,
            noise_std: 0.1,
            restore_prob: 0.01,
            ema: 0.999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RottaConfig {
    pub lr: Option<f64>,
    pub capacity: usize,
    pub update_every: usize,
    pub tau_age: f64,
    pub ema: f64,
    pub noise_std: f64,
    pub alpha: f64,
    pub momentum: f64,
}

impl Default for RottaConfig {
    fn default() -> Self {
        RottaConfig {
            lr: None,
            capacity: 64,
            update_every: 4,
            tau_age: 64.0,
            ema: 0.999,
            noise_std: 0.1,
            alpha: crate::model::DEFAULT_RBN_ALPHA,
            momentum: crate::model::DEFAULT_RBN_MOMENTUM,
        }
    }
}

/// Hyperparameters for every method. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// SGD learning rate shared by the gradient-based methods.
    pub lr: f64,
    /// Report predictions from after the batch's own update.
    pub predict_after_update: bool,
    pub tent: TentConfig,
    pub eata: EataConfig,
    pub sar: SarConfig,
    pub shot: ShotConfig,
    pub t3a: T3aConfig,
    pub note: NoteConfig,
    pub cotta: CottaConfig,
    pub rotta: RottaConfig,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            lr: 0.1,
            predict_after_update: false,
            tent: TentConfig::default(),
            eata: EataConfig::default(),
            sar: SarConfig::default(),
            shot: ShotConfig::default(),
            t3a: T3aConfig::default(),
            note: NoteConfig::default(),
            cotta: CottaConfig::default(),
            rotta: RottaConfig::default(),
        }
    }
}

/// Builds the adapter for `method` around `model`, which must already use
/// the normalization the method expects and carry its source snapshot.
/// `source_val` feeds EATA's Fisher estimate.
pub fn build_adapter(
    method: Method,
    model: Model,
    cfg: &AdapterConfig,
    source_val: Option<&Dataset>,
    rng: Rng,
) -> Result<Box<dyn Adapter>> {
    let lr = |o: Option<f64>| o.unwrap_or(cfg.lr);
    let after = cfg.predict_after_update;
    Ok(match method {
        Method::Baseline => Box::new(Baseline::new(model)),
        Method::Tent => Box::new(Tent::new(model, lr(cfg.tent.lr), cfg.tent.entropy_threshold, after)?),
        Method::Eata => {
            let val = source_val
                .ok_or_else(|| Error::invalid("EATA needs source validation data for its Fisher weights"))?;
            Box::new(Eata::new(model, &cfg.eata, lr(cfg.eata.lr), val, after)?)
        }
        Method::Sar => Box::new(Sar::new(model, &cfg.sar, lr(cfg.sar.lr), after)?),
        Method::Shot => Box::new(Shot::new(model, cfg.shot.beta, lr(cfg.shot.lr), after)?),
        Method::T3a => Box::new(T3a::new(model, cfg.t3a.support_cap)?),
        Method::Note => Box::new(Note::new(model, &cfg.note, lr(cfg.note.lr), after, rng)?),
        Method::Cotta => Box::new(Cotta::new(model, &cfg.cotta, lr(cfg.cotta.lr), after, rng)?),
        Method::Rotta => Box::new(Rotta::new(model, &cfg.rotta, lr(cfg.rotta.lr), after, rng)?),
    })
}
