use crate::adapters::{Adapter, Method};
use crate::error::Result;
use crate::model::Model;
use crate::numcore::Matrix;

/// Frozen source model with eval statistics.
#[derive(Clone, Debug)]
pub struct Baseline {
    model: Model,
}

impl Baseline {
    pub fn new(model: Model) -> Self {
        Baseline { model }
    }
}

impl Adapter for Baseline {
    fn method(&self) -> Method {
        Method::Baseline
    }

    fn model(&self) -> &Model {
        &self.model
    }

    fn step(&mut self, x: &Matrix) -> Result<Matrix> {
        self.model.infer(x)?.probs()
    }
}
