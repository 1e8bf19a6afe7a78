use crate::adapters::{Adapter, Method};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::matrix::{argmax, dot};
use crate::numcore::prob::{normalized, softmax_in_place};
use crate::numcore::{entropy, Matrix};

#[derive(Clone, Debug, PartialEq)]
struct Support {
    feature: Vec<f64>,
    entropy: f64,
    order: u64,
}

/// Per-class support sets and the prototypes derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct T3aState {
    /// Normalized head rows the prototypes start from.
    pub initial: Vec<Vec<f64>>,
    pub prototypes: Vec<Vec<f64>>,
    supports: Vec<Vec<Support>>,
}

impl T3aState {
    pub fn support_sizes(&self) -> Vec<usize> {
        self.supports.iter().map(Vec::len).collect()
    }

    pub fn support_entropies(&self, class: usize) -> Vec<f64> {
        self.supports[class].iter().map(|s| s.entropy).collect()
    }
}

/// Training-free classifier adjustment: the head is replaced by prototypes
/// averaged from confident test features. Model parameters never change.
#[derive(Clone, Debug)]
pub struct T3a {
    model: Model,
    cap: usize,
    state: T3aState,
    counter: u64,
}

impl T3a {
    pub fn new(model: Model, support_cap: usize) -> Result<Self> {
        let w = &model.head.weight;
        let initial: Vec<Vec<f64>> = (0..w.cols())
            .map(|c| normalized(&(0..w.rows()).map(|r| w[(r, c)]).collect::<Vec<_>>()))
            .collect();
        if initial.iter().any(|v| v.iter().all(|&x| x == 0.0)) {
            return Err(Error::ZeroVector);
        }
        Ok(T3a {
            model,
            cap: support_cap,
            state: T3aState {
                prototypes: initial.clone(),
                supports: vec![Vec::new(); initial.len()],
                initial,
            },
            counter: 0,
        })
    }

    pub fn state(&self) -> &T3aState {
        &self.state
    }

    fn scores(&self, z: &[f64]) -> Vec<f64> {
        self.state.prototypes.iter().map(|p| dot(z, p)).collect()
    }

    fn refresh(&mut self, class: usize) {
        let mut sum = self.state.initial[class].clone();
        for s in &self.state.supports[class] {
            for (a, b) in sum.iter_mut().zip(&s.feature) {
                *a += b;
            }
        }
        self.state.prototypes[class] = normalized(&sum);
    }

    fn absorb(&mut self, z: Vec<f64>) -> Result<Vec<f64>> {
        let scores = self.scores(&z);
        let provisional = argmax(&scores);
        let mut p = scores;
        softmax_in_place(&mut p);
        let h = entropy(&Matrix::row_vector(&p))?[0];
        if self.cap > 0 {
            self.counter += 1;
            let set = &mut self.state.supports[provisional];
            set.push(Support {
                feature: z.clone(),
                entropy: h,
                order: self.counter,
            });
            if set.len() > self.cap {
                // drop the least confident; among equals the newest
                let worst = (0..set.len())
                    .max_by(|&a, &b| {
                        set[a]
                            .entropy
                            .total_cmp(&set[b].entropy)
                            .then(set[a].order.cmp(&set[b].order))
                    })
                    .expect("nonempty");
                set.remove(worst);
            }
            self.refresh(provisional);
        }
        let mut out = self.scores(&z);
        softmax_in_place(&mut out);
        Ok(out)
    }
}

impl Adapter for T3a {
    fn method(&self) -> Method {
        Method::T3a
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn step(&mut self, x: &Matrix) -> Result<Matrix> {
        let fwd = self.model.infer(x)?;
        let mut rows = Vec::with_capacity(x.rows());
        for r in fwd.features.row_iter() {
            rows.push(self.absorb(normalized(r))?);
        }
        Matrix::from_rows(&rows)
    }
}
