use crate::adapters::common::{check_lr, ema_update, gaussian_augment, require_source, sgd};
use crate::adapters::{Adapter, CottaConfig, Method};
use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup, ParamImage, ParamSelector, StatsMode};
use crate::numcore::loss::soft_cross_entropy;
use crate::numcore::{Matrix, Rng};

/// A student network updated by SGD and a teacher tracking it by an
/// exponential moving average over a parameter group.
#[derive(Clone, Debug)]
pub struct TeacherStudent {
    pub student: Model,
    pub teacher: Model,
    pub group: ParamGroup,
    pub ema: f64,
}

impl TeacherStudent {
    pub fn new(model: Model, selector: ParamSelector, ema: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema) {
            return Err(Error::invalid(format!("teacher momentum {ema}")));
        }
        let group = ParamGroup::resolve(selector, &model);
        Ok(TeacherStudent {
            teacher: model.clone(),
            student: model,
            group,
            ema,
        })
    }

    pub fn update_teacher(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, &self.group.slots, self.ema)
    }
}

/// Continual adaptation: augmentation-averaged teacher targets, a student
/// fitted to them, a moving-average teacher and stochastic restoration of
/// student weights to the source.
#[derive(Clone, Debug)]
pub struct Cotta {
    pair: TeacherStudent,
    source: ParamImage,
    lr: f64,
    augmentations: usize,
    noise_std: f64,
    restore_prob: f64,
    predict_after_update: bool,
    rng: Rng,
    steps: usize,
}

impl Cotta {
    pub fn new(model: Model, cfg: &CottaConfig, lr: f64, predict_after_update: bool, rng: Rng) -> Result<Self> {
        check_lr(lr)?;
        if cfg.augmentations == 0 {
            return Err(Error::invalid("CoTTA needs at least one augmentation"));
        }
        if !(cfg.noise_std >= 0.0) || !(0.0..=1.0).contains(&cfg.restore_prob) {
            return Err(Error::invalid(format!("CoTTA config {cfg:?}")));
        }
        let source = require_source(&model)?;
        Ok(Cotta {
            pair: TeacherStudent::new(model, ParamSelector::All, cfg.ema)?,
            source,
            lr,
            augmentations: cfg.augmentations,
            noise_std: cfg.noise_std,
            restore_prob: cfg.restore_prob,
            predict_after_update,
            rng,
            steps: 0,
        })
    }

    pub fn pair(&self) -> &TeacherStudent {
        &self.pair
    }

    /// Mean teacher prediction over noise-augmented copies of `x`.
    fn targets(&mut self, x: &Matrix) -> Result<Matrix> {
        let mut acc = Matrix::zeros(x.rows(), self.pair.teacher.classes());
        for _ in 0..self.augmentations {
            let xa = gaussian_augment(x, self.noise_std, &mut self.rng);
            acc = acc.add(&self.pair.teacher.infer(&xa)?.probs()?)?;
        }
        acc.scale(1.0 / self.augmentations as f64);
        Ok(acc)
    }
}

impl Adapter for Cotta {
    fn method(&self) -> Method {
        Method::Cotta
    }

    fn model(&self) -> &Model {
        &self.pair.teacher
    }

    fn step(&mut self, x: &Matrix) -> Result<Matrix> {
        self.steps += 1;
        let probs = self.pair.teacher.infer(x)?.probs()?;
        let targets = self.targets(x)?;
        let fwd = self.pair.student.forward(x, StatsMode::Train)?;
        let w = vec![1.0 / x.rows() as f64; x.rows()];
        let loss = soft_cross_entropy(&fwd.logits, &targets, &w)?;
        let g = fwd.grad(&loss, &self.pair.group.slots)?;
        sgd(&mut self.pair.student, &g, self.lr, self.steps)?;
        self.pair.update_teacher()?;
        let slots = self.pair.group.slots.clone();
        self.pair
            .student
            .restore_stochastic(&self.source, &slots, self.restore_prob, &mut self.rng)?;
        if self.predict_after_update {
            return self.pair.teacher.infer(x)?.probs();
        }
        Ok(probs)
    }
}
