use crate::adapters::common::{check_lr, sgd};
use crate::adapters::{Adapter, Method};
use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup, ParamSelector, StatsMode};
use crate::numcore::loss::{cross_entropy, information_maximization};
use crate::numcore::matrix::{argmax, dot, l2_norm};
use crate::numcore::prob::normalized;
use crate::numcore::Matrix;

/// Source-hypothesis transfer: the head stays fixed while the encoder
/// minimizes information-maximization loss plus cross-entropy against
/// clustering pseudo-labels.
#[derive(Clone, Debug)]
pub struct Shot {
    model: Model,
    group: ParamGroup,
    beta: f64,
    lr: f64,
    predict_after_update: bool,
    steps: usize,
}

impl Shot {
    pub fn new(model: Model, beta: f64, lr: f64, predict_after_update: bool) -> Result<Self> {
        check_lr(lr)?;
        if !(beta >= 0.0) {
            return Err(Error::invalid(format!("SHOT pseudo-label weight {beta}")));
        }
        let group = ParamGroup::resolve(ParamSelector::EncoderOnly, &model);
        Ok(Shot {
            model,
            group,
            beta,
            lr,
            predict_after_update,
            steps: 0,
        })
    }
}

fn augmented_unit(features: &Matrix) -> Vec<Vec<f64>> {
    features
        .row_iter()
        .map(|r| {
            let mut v = r.to_vec();
            v.push(1.0);
            normalized(&v)
        })
        .collect()
}

fn nearest(f: &[f64], centroids: &[Vec<f64>]) -> usize {
    let sims: Vec<f64> = centroids
        .iter()
        .map(|c| {
            let n = l2_norm(c);
            if n == 0.0 {
                f64::NEG_INFINITY
            } else {
                dot(f, c) / n
            }
        })
        .collect();
    argmax(&sims)
}

/// Pseudo-labels from two rounds of cosine clustering: centroids weighted
/// by the predicted probabilities, then centroids of the hard assignment.
/// A class left empty by the first assignment keeps its first centroid.
pub fn centroid_pseudo_labels(features: &Matrix, probs: &Matrix) -> Result<Vec<usize>> {
    if features.rows() != probs.rows() {
        return Err(Error::shape("features and predictions disagree on batch size"));
    }
    let f = augmented_unit(features);
    let dim = features.cols() + 1;
    let classes = probs.cols();
    let mut centroids = vec![vec![0.0; dim]; classes];
    let mut mass = vec![0.0; classes];
    for (i, fi) in f.iter().enumerate() {
        for k in 0..classes {
            let w = probs[(i, k)];
            mass[k] += w;
            for (c, v) in centroids[k].iter_mut().zip(fi) {
                *c += w * v;
            }
        }
    }
    for (c, m) in centroids.iter_mut().zip(&mass) {
        if *m > 0.0 {
            c.iter_mut().for_each(|v| *v /= m);
        }
    }
    let first: Vec<usize> = f.iter().map(|fi| nearest(fi, &centroids)).collect();

    let mut second = vec![vec![0.0; dim]; classes];
    let mut count = vec![0usize; classes];
    for (fi, &k) in f.iter().zip(&first) {
        count[k] += 1;
        for (c, v) in second[k].iter_mut().zip(fi) {
            *c += v;
        }
    }
    for k in 0..classes {
        if count[k] == 0 {
            second[k] = centroids[k].clone();
        } else {
            second[k].iter_mut().for_each(|v| *v /= count[k] as f64);
        }
    }
    Ok(f.iter().map(|fi| nearest(fi, &second)).collect())
}

impl Adapter for Shot {
    fn method(&self) -> Method {
        Method::Shot
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn step(&mut self, x: &Matrix) -> Result<Matrix> {
        self.steps += 1;
        let fwd = self.model.forward(x, StatsMode::Train)?;
        let probs = fwd.probs()?;
        let mut loss = information_maximization(&fwd.logits)?;
        if self.beta > 0.0 {
            let labels = centroid_pseudo_labels(&fwd.features, &probs)?;
            loss = loss.add_scaled(&cross_entropy(&fwd.logits, &labels)?, self.beta)?;
        }
        let g = fwd.grad(&loss, &self.group.slots)?;
        sgd(&mut self.model, &g, self.lr, self.steps)?;
        if self.predict_after_update {
            return self.model.forward_detached(x, StatsMode::Train)?.probs();
        }
        Ok(probs)
    }
}
