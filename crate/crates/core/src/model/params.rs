use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::{Matrix, ParamId, Rng};

/// Copy of every trainable tensor, in canonical slot order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamImage {
    pub entries: Vec<(ParamId, Matrix)>,
}

impl ParamImage {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.entries.iter().find(|(k, _)| *k == id).map(|(_, m)| m)
    }

    /// Euclidean distance between two images over their shared slots.
    pub fn distance(&self, other: &ParamImage) -> f64 {
        let mut acc = 0.0;
        for (id, m) in &self.entries {
            if let Some(o) = other.get(*id) {
                acc += m
                    .as_slice()
                    .iter()
                    .zip(o.as_slice())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
        }
        acc.sqrt()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSelector {
    /// Every normalization γ and β, nothing else.
    NormAffineOnly,
    /// Encoder weights, biases and normalization affine; no head.
    EncoderOnly,
    All,
}

/// A resolved set of parameter slots a method is allowed to update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub selector: ParamSelector,
    pub slots: Vec<ParamId>,
}

impl ParamGroup {
    pub fn resolve(selector: ParamSelector, model: &Model) -> ParamGroup {
        let slots = model
            .param_ids()
            .into_iter()
            .filter(|id| match selector {
                ParamSelector::NormAffineOnly => id.is_norm_affine(),
                ParamSelector::EncoderOnly => !id.is_head(),
                ParamSelector::All => true,
            })
            .collect();
        ParamGroup { selector, slots }
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.slots.contains(&id)
    }
}

impl Model {
    pub fn snapshot(&self) -> ParamImage {
        ParamImage {
            entries: self
                .param_ids()
                .into_iter()
                .map(|id| (id, self.param(id).expect("listed slot").clone()))
                .collect(),
        }
    }

    pub fn restore(&mut self, image: &ParamImage) -> Result<()> {
        self.check_image(image)?;
        for (id, m) in &image.entries {
            *self.param_mut(*id).expect("checked") = m.clone();
        }
        Ok(())
    }

    /// Resets each scalar of the slots in `slots` to its value in `image`
    /// independently with probability `prob`.
    pub fn restore_stochastic(
        &mut self,
        image: &ParamImage,
        slots: &[ParamId],
        prob: f64,
        rng: &mut Rng,
    ) -> Result<()> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::invalid(format!("restore probability {prob}")));
        }
        self.check_image(image)?;
        if prob == 0.0 {
            return Ok(());
        }
        for &id in slots {
            let src = image
                .get(id)
                .ok_or_else(|| Error::UnknownSlot(id.to_string()))?;
            let dst = self.param_mut(id).ok_or_else(|| Error::UnknownSlot(id.to_string()))?;
            for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                if prob >= 1.0 || rng.bernoulli(prob) {
                    *d = *s;
                }
            }
        }
        Ok(())
    }

    fn check_image(&self, image: &ParamImage) -> Result<()> {
        for (id, m) in &image.entries {
            let cur = self
                .param(*id)
                .ok_or_else(|| Error::shape(format!("image slot {id} not in model")))?;
            if cur.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "slot {id}: image {:?} vs model {:?}",
                    m.shape(),
                    cur.shape()
                )));
            }
        }
        if image.entries.len() != self.param_ids().len() {
            return Err(Error::shape("image does not cover every model slot"));
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ShapeEntry {
    slot: String,
    rows: usize,
    cols: usize,
}

/// On-disk model image: a format version, a shape manifest of the trainable
/// slots, the full model (parameters, normalization state, source snapshot)
/// and the recorded source-validation accuracy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    manifest: Vec<ShapeEntry>,
    pub model: Model,
    pub source_val_accuracy: Option<f64>,
}

impl Checkpoint {
    pub fn new(model: Model, source_val_accuracy: Option<f64>) -> Self {
        let manifest = model
            .param_ids()
            .into_iter()
            .map(|id| {
                let (rows, cols) = model.param(id).expect("listed slot").shape();
                ShapeEntry {
                    slot: id.to_string(),
                    rows,
                    cols,
                }
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            manifest,
            model,
            source_val_accuracy,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        for entry in &ck.manifest {
            let found = ck
                .model
                .param_ids()
                .into_iter()
                .find(|id| id.to_string() == entry.slot)
                .and_then(|id| ck.model.param(id))
                .map(Matrix::shape);
            if found != Some((entry.rows, entry.cols)) {
                return Err(Error::shape(format!(
                    "checkpoint slot {} does not match its manifest",
                    entry.slot
                )));
            }
        }
        Ok(ck)
    }
}
