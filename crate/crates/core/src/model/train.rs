use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::model::{Model, StatsMode};
use crate::numcore::loss::cross_entropy;
use crate::numcore::{Matrix, Rng};

/// Borrowed features with one label per row.
#[derive(Copy, Clone, Debug)]
pub struct LabeledView<'a> {
    pub x: &'a Matrix,
    pub y: &'a [usize],
}

impl<'a> LabeledView<'a> {
    pub fn new(x: &'a Matrix, y: &'a [usize]) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::shape(format!(
                "{} rows with {} labels",
                x.rows(),
                y.len()
            )));
        }
        Ok(LabeledView { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Heavy-ball momentum for the source optimizer.
    pub momentum: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub steps: usize,
}

pub fn accuracy(model: &Model, data: LabeledView<'_>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = model.infer(data.x)?.logits.argmax_rows();
    let hits = pred.iter().zip(data.y).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Supervised source training by mini-batch SGD on cross-entropy. All
/// parameters are trained; θ₀ is frozen afterwards.
pub fn pretrain(
    model: &mut Model,
    train: LabeledView<'_>,
    val: LabeledView<'_>,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("empty source training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("pretraining batch size must be positive"));
    }
    let ids = model.param_ids();
    let mut velocity: Option<crate::numcore::Gradients> = None;
    let mut step = 0;
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(train.len());
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = train.x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| train.y[i]).collect();
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Diverged {
                    step,
                    loss: f64::NAN,
                },
                other => other,
            };
            let fwd = model.forward(&xb, StatsMode::Train).map_err(diverged)?;
            let loss = cross_entropy(&fwd.logits, &yb).map_err(diverged)?;
            if !loss.value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: loss.value,
                });
            }
            let grads = fwd.grad(&loss, &ids).map_err(diverged)?;
            let update = match velocity.take() {
                Some(mut v) if cfg.momentum > 0.0 => {
                    for (id, g) in grads.iter() {
                        let vm = v.get_mut(id).expect("same slots");
                        for (a, b) in vm.as_mut_slice().iter_mut().zip(g.as_slice()) {
                            *a = cfg.momentum * *a + b;
                        }
                    }
                    v
                }
                _ => grads,
            };
            model.apply_sgd(&update, cfg.lr)?;
            velocity = Some(update);
            epoch_loss += loss.value * chunk.len() as f64;
            last_loss = loss.value;
            step += 1;
        }
        if !model.snapshot().entries.iter().all(|(_, m)| m.is_finite()) {
            return Err(Error::Diverged {
                step,
                loss: last_loss,
            });
        }
        debug!(epoch, loss = epoch_loss / train.len() as f64, "pretrain epoch");
    }
    let outcome = PretrainOutcome {
        final_loss: last_loss,
        train_accuracy: accuracy(model, train)?,
        val_accuracy: accuracy(model, val)?,
        steps: step,
    };
    model.freeze_source()?;
    Ok(outcome)
}
