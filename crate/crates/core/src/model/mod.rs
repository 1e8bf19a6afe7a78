//! The adaptable network: encoder blocks of affine → normalization → ReLU
//! followed by a linear classifier head.

mod norm;
mod params;
mod train;

pub use norm::{
    iabn_statistics, rbn_statistics, soft_shrink, NormKind, NormLayer, ShrinkParams, StatsMode,
    DEFAULT_IABN_KAPPA, DEFAULT_RBN_ALPHA, DEFAULT_RBN_MOMENTUM,
};
pub use params::{Checkpoint, ParamGroup, ParamImage, ParamSelector, CHECKPOINT_VERSION};
pub use train::{pretrain, LabeledView, PretrainConfig, PretrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tape::{self, GradTape, Gradients, ParamId};
use crate::numcore::{softmax, LossGrad, Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// in × out
    pub weight: Matrix,
    /// 1 × out
    pub bias: Matrix,
}

impl Linear {
    /// Uniform fan-in initialization, `U(−1/√in, 1/√in)` for weights and bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let w = (0..input * output)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let b = (0..output).map(|_| rng.uniform_range(-bound, bound)).collect();
        Linear {
            weight: Matrix::from_vec(input, output, w).expect("sized"),
            bias: Matrix::from_vec(1, output, b).expect("sized"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub linear: Linear,
    pub norm: NormLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub norm: NormKind,
}

impl ModelConfig {
    pub fn new(input_dim: usize, classes: usize, norm: NormKind) -> Self {
        ModelConfig {
            input_dim,
            hidden: vec![64, 64],
            classes,
            norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub blocks: Vec<Block>,
    pub head: Linear,
    source: Option<ParamImage>,
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Encoder output (the head's input).
    pub features: Matrix,
    pub logits: Matrix,
    pub tape: GradTape,
}

impl Forward {
    pub fn probs(&self) -> Result<Matrix> {
        softmax(&self.logits)
    }

    /// Gradients of `loss` (computed on these logits) for `wrt`.
    pub fn grad(&self, loss: &LossGrad, wrt: &[ParamId]) -> Result<Gradients> {
        tape::grad(&self.tape, loss, wrt)
    }
}

impl Model {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.classes < 2 || cfg.hidden.contains(&0) {
            return Err(Error::invalid(format!("model config {cfg:?}")));
        }
        let mut blocks = Vec::with_capacity(cfg.hidden.len());
        let mut width = cfg.input_dim;
        for &h in &cfg.hidden {
            blocks.push(Block {
                linear: Linear::init(width, h, rng),
                norm: NormLayer::new(cfg.norm, h),
            });
            width = h;
        }
        Ok(Model {
            blocks,
            head: Linear::init(width, cfg.classes, rng),
            source: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.blocks
            .first()
            .map_or(self.head.weight.rows(), |b| b.linear.weight.rows())
    }

    pub fn feature_dim(&self) -> usize {
        self.head.weight.rows()
    }

    pub fn classes(&self) -> usize {
        self.head.weight.cols()
    }

    pub fn norm_kind(&self) -> Option<NormKind> {
        self.blocks.first().map(|b| b.norm.kind)
    }

    /// Switches every normalization layer to `kind`; see [`NormLayer::convert`].
    pub fn convert_norm(&mut self, kind: NormKind) -> Result<()> {
        for b in &mut self.blocks {
            b.norm.convert(kind)?;
        }
        Ok(())
    }

    pub fn norm_layers_mut(&mut self) -> impl Iterator<Item = &mut NormLayer> {
        self.blocks.iter_mut().map(|b| &mut b.norm)
    }

    /// Every trainable slot in canonical order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(4 * self.blocks.len() + 2);
        for i in 0..self.blocks.len() {
            ids.extend([
                ParamId::Weight(i),
                ParamId::Bias(i),
                ParamId::Gamma(i),
                ParamId::Beta(i),
            ]);
        }
        ids.extend([ParamId::HeadWeight, ParamId::HeadBias]);
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        match id {
            ParamId::Weight(i) => self.blocks.get(i).map(|b| &b.linear.weight),
            ParamId::Bias(i) => self.blocks.get(i).map(|b| &b.linear.bias),
            ParamId::Gamma(i) => self.blocks.get(i).map(|b| &b.norm.gamma),
            ParamId::Beta(i) => self.blocks.get(i).map(|b| &b.norm.beta),
            ParamId::HeadWeight => Some(&self.head.weight),
            ParamId::HeadBias => Some(&self.head.bias),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        match id {
            ParamId::Weight(i) => self.blocks.get_mut(i).map(|b| &mut b.linear.weight),
            ParamId::Bias(i) => self.blocks.get_mut(i).map(|b| &mut b.linear.bias),
            ParamId::Gamma(i) => self.blocks.get_mut(i).map(|b| &mut b.norm.gamma),
            ParamId::Beta(i) => self.blocks.get_mut(i).map(|b| &mut b.norm.beta),
            ParamId::HeadWeight => Some(&mut self.head.weight),
            ParamId::HeadBias => Some(&mut self.head.bias),
        }
    }

    /// The source snapshot θ₀, once frozen.
    pub fn source(&self) -> Option<&ParamImage> {
        self.source.as_ref()
    }

    /// Records θ₀. Allowed once.
    pub fn freeze_source(&mut self) -> Result<()> {
        if self.source.is_some() {
            return Err(Error::invalid("source snapshot already taken"));
        }
        self.source = Some(self.snapshot());
        Ok(())
    }

    /// Forward pass. In [`StatsMode::Train`] batch-statistics layers update
    /// their running statistics.
    pub fn forward(&mut self, x: &Matrix, mode: StatsMode) -> Result<Forward> {
        let (fwd, updates) = self.run(x, mode)?;
        for (block, update) in self.blocks.iter_mut().zip(updates) {
            if let Some(u) = update {
                block.norm.commit(&u);
            }
        }
        Ok(fwd)
    }

    /// Forward pass that leaves the model untouched (running statistics
    /// included) whatever the mode.
    pub fn forward_detached(&self, x: &Matrix, mode: StatsMode) -> Result<Forward> {
        Ok(self.run(x, mode)?.0)
    }

    /// Eval-statistics forward.
    pub fn infer(&self, x: &Matrix) -> Result<Forward> {
        self.forward_detached(x, StatsMode::Eval)
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, x: &Matrix, mode: StatsMode) -> Result<(Forward, Vec<Option<norm::StatsUpdate>>)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input width {} but model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        x.ensure_finite("model input")?;
        let mut tape = GradTape::new();
        let mut h = x.clone();
        let mut updates = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let a = tape.affine(
                &h,
                &block.linear.weight,
                &block.linear.bias,
                ParamId::Weight(i),
                ParamId::Bias(i),
            )?;
            let (axis, stats, update) = block.norm.statistics(&a, mode)?;
            let xhat = tape.standardize(&a, axis, stats)?;
            let y = tape.scale_shift(
                &xhat,
                &block.norm.gamma,
                &block.norm.beta,
                ParamId::Gamma(i),
                ParamId::Beta(i),
            )?;
            h = tape.relu(&y);
            updates.push(update);
        }
        let logits = tape.affine(
            &h,
            &self.head.weight,
            &self.head.bias,
            ParamId::HeadWeight,
            ParamId::HeadBias,
        )?;
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
        Ok((
            Forward {
                features: h,
                logits,
                tape,
            },
            updates,
        ))
    }

    /// Plain SGD: `θ ← θ − lr·g` for every slot present in `grads`.
    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = self
                .param_mut(id)
                .ok_or_else(|| Error::UnknownSlot(id.to_string()))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("gradient for {id}")));
            }
            for (v, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *v -= lr * d;
            }
        }
        Ok(())
    }

    /// Adds `scale·direction` to the listed slots (used for sharpness-aware
    /// perturbations).
    pub fn perturb(&mut self, direction: &Gradients, scale: f64) -> Result<()> {
        self.apply_sgd(direction, -scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(norm: NormKind) -> ModelConfig {
        ModelConfig {
            input_dim: 4,
            hidden: vec![6, 5],
            classes: 3,
            norm,
        }
    }

    #[test]
    fn layer_norm_identity_block() {
        // Identity weights; the row is already standardized, so the block
        // reduces to ReLU.
        let mut rng = Rng::new(0);
        let mut m = Model::new(
            &ModelConfig {
                input_dim: 3,
                hidden: vec![3],
                classes: 2,
                norm: NormKind::LayerNorm,
            },
            &mut rng,
        )
        .unwrap();
        m.blocks[0].linear.weight = Matrix::identity(3);
        m.blocks[0].linear.bias = Matrix::zeros(1, 3);
        m.blocks[0].norm.eps = 0.0;
        let s = (1.5f64).sqrt();
        let x = Matrix::row_vector(&[-s, 0.0, s]);
        let f = m.infer(&x).unwrap();
        let expect = [0.0, 0.0, s];
        for (a, b) in f.features.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_norm_eval_default_stats_is_identity_on_positive_inputs() {
        let mut rng = Rng::new(1);
        let mut m = Model::new(
            &ModelConfig {
                input_dim: 3,
                hidden: vec![3],
                classes: 2,
                norm: NormKind::BatchNorm,
            },
            &mut rng,
        )
        .unwrap();
        m.blocks[0].linear.weight = Matrix::identity(3);
        m.blocks[0].linear.bias = Matrix::zeros(1, 3);
        m.blocks[0].norm.eps = 0.0;
        let x = Matrix::from_rows(&[vec![0.5, 1.0, 2.0], vec![3.0, 0.1, 0.2]]).unwrap();
        let f = m.infer(&x).unwrap();
        for (a, b) in f.features.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut rng = Rng::new(2);
        for norm in [NormKind::BatchNorm, NormKind::LayerNorm, NormKind::Iabn, NormKind::Rbn] {
            let mut m = Model::new(&cfg(norm), &mut rng).unwrap();
            let x = Matrix::from_vec(5, 4, (0..20).map(|_| rng.normal()).collect()).unwrap();
            let before = m.clone();
            let a = m.forward(&x, StatsMode::Eval).unwrap();
            let b = m.forward(&x, StatsMode::Eval).unwrap();
            assert_eq!(a.logits, b.logits);
            assert_eq!(m, before);
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut rng = Rng::new(3);
        let m = Model::new(&cfg(NormKind::LayerNorm), &mut rng).unwrap();
        assert!(m.infer(&Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut rng = Rng::new(4);
        let mut m = Model::new(&cfg(NormKind::BatchNorm), &mut rng).unwrap();
        let x = Matrix::from_vec(8, 4, (0..32).map(|_| rng.normal() + 3.0).collect()).unwrap();
        let before = m.blocks[0].norm.running_mean.clone();
        m.forward(&x, StatsMode::Train).unwrap();
        assert_ne!(m.blocks[0].norm.running_mean, before);
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut rng = Rng::new(5);
        let mut m = Model::new(&cfg(NormKind::LayerNorm), &mut rng).unwrap();
        let snap = m.snapshot();
        m.head.weight[(0, 0)] += 1.0;
        m.blocks[1].norm.beta[(0, 2)] -= 0.5;
        m.restore(&snap).unwrap();
        assert_eq!(m.snapshot(), snap);

        let mut other = m.clone();
        other.head.weight[(1, 1)] = 9.0;
        let ids = m.param_ids();
        other.restore_stochastic(&snap, &ids, 0.0, &mut rng).unwrap();
        assert_eq!(other.head.weight[(1, 1)], 9.0);
        other.restore_stochastic(&snap, &ids, 1.0, &mut rng).unwrap();
        assert_eq!(other.snapshot(), snap);
    }

    #[test]
    fn restore_rejects_wrong_shapes() {
        let mut rng = Rng::new(6);
        let mut a = Model::new(&cfg(NormKind::LayerNorm), &mut rng).unwrap();
        let b = Model::new(
            &ModelConfig {
                hidden: vec![7, 5],
                ..cfg(NormKind::LayerNorm)
            },
            &mut rng,
        )
        .unwrap();
        assert!(a.restore(&b.snapshot()).is_err());
    }

    #[test]
    fn source_freezes_once() {
        let mut rng = Rng::new(7);
        let mut m = Model::new(&cfg(NormKind::LayerNorm), &mut rng).unwrap();
        m.freeze_source().unwrap();
        assert!(m.freeze_source().is_err());
    }

    #[test]
    fn param_groups() {
        let mut rng = Rng::new(8);
        let m = Model::new(&cfg(NormKind::LayerNorm), &mut rng).unwrap();
        let g = ParamGroup::resolve(ParamSelector::NormAffineOnly, &m);
        assert_eq!(
            g.slots,
            vec![ParamId::Gamma(0), ParamId::Beta(0), ParamId::Gamma(1), ParamId::Beta(1)]
        );
        let g = ParamGroup::resolve(ParamSelector::EncoderOnly, &m);
        assert!(!g.contains(ParamId::HeadWeight) && g.contains(ParamId::Weight(0)));
        assert_eq!(ParamGroup::resolve(ParamSelector::All, &m).slots, m.param_ids());
    }
}
