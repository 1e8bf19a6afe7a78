use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Rng};

/// Gaussian class-conditional domain with symmetric label noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// One row per class.
    pub class_means: Matrix,
    /// Per-coordinate standard deviation of every class.
    pub cov_scale: f64,
    /// Probability that an observed label is replaced by a different one.
    pub label_noise: f64,
}

impl DomainSpec {
    pub fn new(name: impl Into<String>, class_means: Matrix, cov_scale: f64, label_noise: f64) -> Result<Self> {
        let spec = DomainSpec {
            name: name.into(),
            class_means,
            cov_scale,
            label_noise,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Random class means with expected pairwise distance `separation`.
    pub fn generate(
        name: impl Into<String>,
        classes: usize,
        dim: usize,
        separation: f64,
        cov_scale: f64,
        label_noise: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if classes < 2 || dim == 0 {
            return Err(Error::invalid(format!("{classes} classes in {dim} dimensions")));
        }
        let k = separation / (2.0 * dim as f64).sqrt();
        let data = (0..classes * dim).map(|_| k * rng.normal()).collect();
        DomainSpec::new(name, Matrix::from_vec(classes, dim, data)?, cov_scale, label_noise)
    }

    pub fn classes(&self) -> usize {
        self.class_means.rows()
    }

    pub fn dim(&self) -> usize {
        self.class_means.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes() < 2 {
            return Err(Error::invalid("a domain needs at least two classes"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::invalid(format!("label noise {} outside [0, 1)", self.label_noise)));
        }
        if !(self.cov_scale > 0.0 && self.cov_scale.is_finite()) {
            return Err(Error::invalid(format!("covariance scale {}", self.cov_scale)));
        }
        self.class_means.ensure_finite("class means")?;
        for a in 0..self.classes() {
            for b in a + 1..self.classes() {
                if self.class_means.row(a) == self.class_means.row(b) {
                    return Err(Error::invalid(format!("classes {a} and {b} share a mean")));
                }
            }
        }
        Ok(())
    }
}

/// Samples drawn from a domain, with both the observed (possibly corrupted)
/// and the true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domain: String,
    pub features: Matrix,
    pub observed: Vec<usize>,
    pub truth: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            domain: self.domain.clone(),
            features: self.features.select_rows(idx),
            observed: idx.iter().map(|&i| self.observed[i]).collect(),
            truth: idx.iter().map(|&i| self.truth[i]).collect(),
        }
    }

    /// Concatenation; the domain name becomes `a+b+…`.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let feats: Vec<&Matrix> = parts.iter().map(|d| &d.features).collect();
        Ok(Dataset {
            domain: parts.iter().map(|d| d.domain.as_str()).collect::<Vec<_>>().join("+"),
            features: Matrix::vstack(&feats)?,
            observed: parts.iter().flat_map(|d| d.observed.iter().copied()).collect(),
            truth: parts.iter().flat_map(|d| d.truth.iter().copied()).collect(),
        })
    }

    /// Splits off the first `ceil(fraction·n)` rows (after the caller's
    /// shuffling) from the rest.
    pub fn split(&self, fraction: f64) -> (Dataset, Dataset) {
        let cut = ((self.len() as f64) * fraction).round() as usize;
        let cut = cut.min(self.len());
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    pub fn mismatch_count(&self) -> usize {
        self.observed.iter().zip(&self.truth).filter(|(a, b)| a != b).count()
    }
}

/// Draws `n` samples with uniformly random classes.
pub fn sample_domain(spec: &DomainSpec, n: usize, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let c = spec.classes();
    let d = spec.dim();
    let mut features = Matrix::zeros(n, d);
    let mut observed = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let y = rng.below(c);
        let mean = spec.class_means.row(y);
        for (v, m) in features.row_mut(i).iter_mut().zip(mean) {
            *v = m + spec.cov_scale * rng.normal();
        }
        let obs = if spec.label_noise > 0.0 && rng.bernoulli(spec.label_noise) {
            // uniform over the other c − 1 labels
            let k = rng.below(c - 1);
            if k >= y {
                k + 1
            } else {
                k
            }
        } else {
            y
        };
        truth.push(y);
        observed.push(obs);
    }
    Ok(Dataset {
        domain: spec.name.clone(),
        features,
        observed,
        truth,
    })
}

/// Givens rotation by `angle` radians in the plane of axes `(i, j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneRotation {
    pub axes: (usize, usize),
    pub angle: f64,
}

/// `x ↦ scale·R·x + offset`, with R a product of plane rotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftTransform {
    pub offset: Vec<f64>,
    pub rotations: Vec<PlaneRotation>,
    pub scale: f64,
}

impl ShiftTransform {
    pub fn identity(dim: usize) -> Self {
        ShiftTransform {
            offset: vec![0.0; dim],
            rotations: Vec::new(),
            scale: 1.0,
        }
    }

    /// Offset of the given Euclidean length along a random direction.
    pub fn random_offset(dim: usize, magnitude: f64, rng: &mut Rng) -> Self {
        let dir: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        ShiftTransform {
            offset: dir.iter().map(|v| magnitude * v / norm).collect(),
            ..ShiftTransform::identity(dim)
        }
    }

    pub fn with_rotation(mut self, axes: (usize, usize), angle: f64) -> Self {
        self.rotations.push(PlaneRotation { axes, angle });
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn offset_magnitude(&self) -> f64 {
        self.offset.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.offset.len() != dim {
            return Err(Error::shape(format!(
                "offset of length {} for a {dim}-dimensional domain",
                self.offset.len()
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("shift scale {}", self.scale)));
        }
        for r in &self.rotations {
            let (i, j) = r.axes;
            if i == j || i >= dim || j >= dim {
                return Err(Error::invalid(format!("rotation plane {:?} in {dim} dimensions", r.axes)));
            }
        }
        Ok(())
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for r in &self.rotations {
            let (i, j) = r.axes;
            let (s, c) = r.angle.sin_cos();
            let (a, b) = (out[i], out[j]);
            out[i] = c * a - s * b;
            out[j] = s * a + c * b;
        }
        for (o, off) in out.iter_mut().zip(&self.offset) {
            *o = *o * self.scale + off;
        }
        out
    }
}

/// Target domain obtained by moving every class mean through `t`. The
/// per-class spread scales with `t.scale`.
pub fn derive_target(source: &DomainSpec, t: &ShiftTransform, label_noise: f64) -> Result<DomainSpec> {
    t.validate(source.dim())?;
    let rows: Vec<Vec<f64>> = source.class_means.row_iter().map(|m| t.apply(m)).collect();
    DomainSpec::new(
        source.name.clone(),
        Matrix::from_rows(&rows)?,
        source.cov_scale * t.scale,
        label_noise,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> DomainSpec {
        DomainSpec::generate("src", 5, 4, 4.0, 1.0, noise, &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn clean_domain_has_no_mismatches() {
        let d = sample_domain(&spec(0.0), 500, &mut Rng::new(1)).unwrap();
        assert_eq!(d.mismatch_count(), 0);
    }

    #[test]
    fn noise_rate_concentrates() {
        let d = sample_domain(&spec(0.5), 10_000, &mut Rng::new(2)).unwrap();
        let frac = d.mismatch_count() as f64 / 10_000.0;
        // binomial sd = 0.005; ±0.02 is four sd
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn sampling_is_seeded() {
        let a = sample_domain(&spec(0.3), 50, &mut Rng::new(3)).unwrap();
        let b = sample_domain(&spec(0.3), 50, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invariants_are_enforced() {
        let means = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(DomainSpec::new("x", means, 1.0, 0.0).is_err());
        let means = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(DomainSpec::new("x", means.clone(), 1.0, 1.0).is_err());
        assert!(DomainSpec::new("x", means.clone(), 0.0, 0.0).is_err());
        assert!(sample_domain(&DomainSpec::new("x", means, 1.0, 0.0).unwrap(), 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn identity_transform_preserves_spec() {
        let s = spec(0.1);
        let t = derive_target(&s, &ShiftTransform::identity(4), 0.1).unwrap();
        assert_eq!(t, s);
        let rotated = ShiftTransform::identity(4).with_rotation((0, 2), 0.0);
        assert_eq!(derive_target(&s, &rotated, 0.1).unwrap(), s);
    }

    #[test]
    fn transform_moves_means() {
        let s = spec(0.0);
        let t = ShiftTransform::identity(4)
            .with_rotation((0, 1), std::f64::consts::FRAC_PI_2)
            .with_scale(2.0);
        let t = ShiftTransform {
            offset: vec![1.0, 0.0, 0.0, 0.0],
            ..t
        };
        let target = derive_target(&s, &t, 0.3).unwrap();
        let m = s.class_means.row(0);
        let expect = [-2.0 * m[1] + 1.0, 2.0 * m[0], 2.0 * m[2], 2.0 * m[3]];
        for (a, b) in target.class_means.row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(target.label_noise, 0.3);
        assert_eq!(target.cov_scale, 2.0);
    }

    #[test]
    fn derive_target_is_pure() {
        let s = spec(0.0);
        let t = ShiftTransform::random_offset(4, 2.0, &mut Rng::new(5));
        assert_eq!(derive_target(&s, &t, 0.2).unwrap(), derive_target(&s, &t, 0.2).unwrap());
        assert!((t.offset_magnitude() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bad_transforms_are_rejected() {
        let s = spec(0.0);
        assert!(derive_target(&s, &ShiftTransform::identity(3), 0.0).is_err());
        let t = ShiftTransform::identity(4).with_rotation((1, 1), 0.3);
        assert!(derive_target(&s, &t, 0.0).is_err());
        assert!(derive_target(&s, &ShiftTransform::identity(4).with_scale(0.0), 0.0).is_err());
    }
}
