use crate::error::{Error, Result};
use crate::model::{Model, ParamImage};
use crate::numcore::loss::cross_entropy;
use crate::numcore::{Gradients, Matrix, ParamId, Rng};
use crate::shiftlab::Dataset;

/// Entropy margin: the absolute value if given, else `factor · ln C`.
pub(crate) fn entropy_margin(factor: f64, absolute: Option<f64>, classes: usize) -> f64 {
    absolute.unwrap_or(factor * (classes as f64).ln())
}

pub(crate) fn check_lr(lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::invalid(format!("learning rate {lr}")));
    }
    Ok(())
}

/// Applies an SGD step and fails (leaving a non-finite model behind) when
/// the update produced non-finite parameters.
pub(crate) fn sgd(model: &mut Model, grads: &Gradients, lr: f64, step: usize) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Diverged {
            step,
            loss: f64::NAN,
        });
    }
    model.apply_sgd(grads, lr)?;
    for (id, _) in grads.iter() {
        if !model.param(id).expect("updated slot").is_finite() {
            return Err(Error::Diverged {
                step,
                loss: f64::NAN,
            });
        }
    }
    Ok(())
}

/// Diagonal Fisher estimate over `slots`: squared cross-entropy gradients
/// on labeled source data, one per mini-batch, averaged over mini-batches.
pub fn fisher_diagonal(model: &Model, data: &Dataset, slots: &[ParamId], batch: usize) -> Result<Gradients> {
    if data.is_empty() {
        return Err(Error::invalid("Fisher estimate needs labeled data"));
    }
    if batch == 0 {
        return Err(Error::invalid("Fisher batch size must be positive"));
    }
    let mut acc = Gradients::default();
    for &id in slots {
        let p = model.param(id).ok_or_else(|| Error::UnknownSlot(id.to_string()))?;
        acc.insert(id, Matrix::zeros(p.rows(), p.cols()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut batches = 0usize;
    for chunk in idx.chunks(batch) {
        let part = data.select(chunk);
        let fwd = model.infer(&part.features)?;
        let loss = cross_entropy(&fwd.logits, &part.observed)?;
        let g = fwd.grad(&loss, slots)?;
        for (id, gm) in g.iter() {
            let a = acc.get_mut(id).expect("initialized");
            for (s, v) in a.as_mut_slice().iter_mut().zip(gm.as_slice()) {
                *s += v * v;
            }
        }
        batches += 1;
    }
    let inv = 1.0 / batches as f64;
    for &id in slots {
        for v in acc.get_mut(id).expect("initialized").as_mut_slice() {
            *v *= inv;
        }
    }
    Ok(acc)
}

/// `x + N(0, std²)` noise per entry.
pub fn gaussian_augment(x: &Matrix, std: f64, rng: &mut Rng) -> Matrix {
    if std == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        *v += std * rng.normal();
    }
    out
}

/// `teacher ← m·teacher + (1−m)·student` over `slots`.
pub(crate) fn ema_update(teacher: &mut Model, student: &Model, slots: &[ParamId], m: f64) -> Result<()> {
    if m == 1.0 {
        return Ok(());
    }
    for &id in slots {
        let s = student.param(id).ok_or_else(|| Error::UnknownSlot(id.to_string()))?;
        let t = teacher.param_mut(id).ok_or_else(|| Error::UnknownSlot(id.to_string()))?;
        for (tv, sv) in t.as_mut_slice().iter_mut().zip(s.as_slice()) {
            // equal to m·t + (1 − m)·s, but exact when t == s
            *tv += (1.0 - m) * (sv - *tv);
        }
    }
    Ok(())
}

/// Copies the listed slots of `image` back into `model`.
pub(crate) fn restore_slots(model: &mut Model, image: &ParamImage, slots: &[ParamId]) -> Result<()> {
    for &id in slots {
        let src = image.get(id).ok_or_else(|| Error::UnknownSlot(id.to_string()))?;
        *model.param_mut(id).ok_or_else(|| Error::UnknownSlot(id.to_string()))? = src.clone();
    }
    Ok(())
}

pub(crate) fn require_source(model: &Model) -> Result<ParamImage> {
    model
        .source()
        .cloned()
        .ok_or_else(|| Error::invalid("model has no frozen source snapshot"))
}
