//! Independent oracles for the integration and acceptance tests.
#![allow(dead_code)]

use ttabench::model::{Model, ModelConfig, NormKind, StatsMode};
use ttabench::numcore::{Gradients, Matrix, ParamId, Rng};

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Small random model with non-trivial affine and running statistics so
/// every branch of the normalization layers is exercised.
pub fn random_model(rng: &mut Rng, kind: NormKind, input: usize, hidden: &[usize], classes: usize) -> Model {
    let mut m = Model::new(
        &ModelConfig {
            input_dim: input,
            hidden: hidden.to_vec(),
            classes,
            norm: kind,
        },
        rng,
    )
    .unwrap();
    for layer in m.norm_layers_mut() {
        for v in layer.gamma.as_mut_slice() {
            *v = 1.0 + 0.3 * rng.normal();
        }
        for v in layer.beta.as_mut_slice() {
            *v = 0.3 * rng.normal();
        }
        for v in layer.running_mean.iter_mut() {
            *v = 0.5 * rng.normal();
        }
        for v in layer.running_var.iter_mut() {
            *v = 0.5 + rng.uniform();
        }
    }
    m
}

/// Central finite differences of `f` with respect to every scalar of the
/// listed slots.
pub fn finite_difference(model: &Model, slots: &[ParamId], h: f64, f: impl Fn(&Model) -> f64) -> Gradients {
    let mut out = Gradients::default();
    let mut probe = model.clone();
    for &id in slots {
        let n = model.param(id).unwrap().as_slice().len();
        let mut g = vec![0.0; n];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = model.param(id).unwrap().as_slice()[k];
            probe.param_mut(id).unwrap().as_mut_slice()[k] = orig + h;
            let up = f(&probe);
            probe.param_mut(id).unwrap().as_mut_slice()[k] = orig - h;
            let down = f(&probe);
            probe.param_mut(id).unwrap().as_mut_slice()[k] = orig;
            *gk = (up - down) / (2.0 * h);
        }
        let p = model.param(id).unwrap();
        out.insert(id, Matrix::from_vec(p.rows(), p.cols(), g).unwrap());
    }
    out
}

/// Relative error of the whole gradient vector,
/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`, over every slot of `numeric`.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients, floor: f64) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (id, n) in numeric.iter() {
        let a = analytic.get(id).unwrap_or_else(|| panic!("no analytic gradient for {id}"));
        for (x, y) in a.as_slice().iter().zip(n.as_slice()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor)
}

/// `Σ dout ⊙ logits` for a detached forward pass.
pub fn linear_readout(model: &Model, x: &Matrix, mode: StatsMode, dout: &Matrix) -> f64 {
    let logits = model.forward_detached(x, mode).unwrap().logits;
    logits.as_slice().iter().zip(dout.as_slice()).map(|(a, b)| a * b).sum()
}

fn rbf(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Textbook MMD² by explicit double sums.
pub fn brute_force_mmd2(x: &Matrix, y: &Matrix, sigma: f64, unbiased: bool) -> f64 {
    let (m, n) = (x.rows(), y.rows());
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if !(unbiased && i == j) {
                kxx += rbf(x.row(i), x.row(j), sigma);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if !(unbiased && i == j) {
                kyy += rbf(y.row(i), y.row(j), sigma);
            }
        }
    }
    let mut kxy = 0.0;
    for i in 0..m {
        for j in 0..n {
            kxy += rbf(x.row(i), y.row(j), sigma);
        }
    }
    let (mm, nn) = (m as f64, n as f64);
    if unbiased {
        kxx / (mm * (mm - 1.0)) + kyy / (nn * (nn - 1.0)) - 2.0 * kxy / (mm * nn)
    } else {
        kxx / (mm * mm) + kyy / (nn * nn) - 2.0 * kxy / (mm * nn)
    }
}

/// Chi-square distance of a histogram to the uniform one of equal mass.
pub fn chi_square_to_uniform(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    let e = total as f64 / hist.len() as f64;
    hist.iter().map(|&h| (h as f64 - e).powi(2) / e).sum()
}

pub const LAYER_CASES: [(&str, NormKind, StatsMode); 7] = [
    ("layernorm", NormKind::LayerNorm, StatsMode::Train),
    ("batchnorm/train", NormKind::BatchNorm, StatsMode::Train),
    ("batchnorm/eval", NormKind::BatchNorm, StatsMode::Eval),
    ("iabn/train", NormKind::Iabn, StatsMode::Train),
    ("iabn/eval", NormKind::Iabn, StatsMode::Eval),
    ("rbn/train", NormKind::Rbn, StatsMode::Train),
    ("rbn/eval", NormKind::Rbn, StatsMode::Eval),
];

pub const LOSS_CASES: [&str; 7] = ["tent", "eata", "sar", "shot", "note", "cotta", "rotta"];

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-7;

fn check_model(rng: &mut Rng, kind: NormKind) -> Model {
    let mut m = random_model(rng, kind, 3, &[5, 4], 3);
    for layer in m.norm_layers_mut() {
        // small threshold so both shrinkage branches occur
        layer.shrink_kappa = 0.5;
        layer.fuse_alpha = 0.3;
    }
    m
}

/// Relative error of the backward pass through a two-block model with the
/// given normalization, for a random linear readout of the logits.
pub fn layer_gradient_error(kind: NormKind, mode: StatsMode, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let model = check_model(&mut rng, kind);
    let slots = model.param_ids();
    // Redraw inputs that put a ReLU input within one step of its kink, seen
    // as central differences at h and h/2 disagreeing.
    loop {
        let x = random_matrix(&mut rng, 6, 3, 1.5);
        let dout = random_matrix(&mut rng, 6, 3, 1.0);
        let readout = |m: &Model| linear_readout(m, &x, mode, &dout);
        let numeric = finite_difference(&model, &slots, FD_STEP, readout);
        let half = finite_difference(&model, &slots, FD_STEP / 2.0, readout);
        if max_relative_error(&half, &numeric, FD_FLOOR) > 1e-6 {
            continue;
        }
        let fwd = model.forward_detached(&x, mode).unwrap();
        let analytic = ttabench::numcore::tape::backward(&fwd.tape, &dout, &slots).unwrap();
        return max_relative_error(&analytic, &numeric, FD_FLOOR);
    }
}

/// Relative error of an adapter objective's gradient over the parameter
/// group that adapter updates.
pub fn loss_gradient_error(case: &str, seed: u64) -> f64 {
    use ttabench::adapters::{centroid_pseudo_labels, fisher_anchor};
    use ttabench::model::{ParamGroup, ParamSelector};
    use ttabench::numcore::loss::{
        cross_entropy, information_maximization, masked_entropy, mean_entropy, soft_cross_entropy,
    };
    use ttabench::numcore::softmax;

    let mut rng = Rng::new(seed);
    let (kind, mode, selector) = match case {
        "note" => (NormKind::Iabn, StatsMode::Train, ParamSelector::NormAffineOnly),
        "rotta" => (NormKind::Rbn, StatsMode::Train, ParamSelector::NormAffineOnly),
        "shot" => (NormKind::LayerNorm, StatsMode::Train, ParamSelector::EncoderOnly),
        "cotta" => (NormKind::LayerNorm, StatsMode::Train, ParamSelector::All),
        _ => (NormKind::LayerNorm, StatsMode::Train, ParamSelector::NormAffineOnly),
    };
    let mut model = check_model(&mut rng, kind);
    model.freeze_source().unwrap();
    // move away from θ₀ so the Fisher anchor is active
    for id in model.param_ids() {
        for v in model.param_mut(id).unwrap().as_mut_slice() {
            *v += 0.1 * rng.normal();
        }
    }
    let slots = ParamGroup::resolve(selector, &model).slots;
    let n = 8;
    let x = random_matrix(&mut rng, n, 3, 1.5);
    let c = model.classes();
    let mask: Vec<bool> = (0..n).map(|i| i == 0 || rng.bernoulli(0.6)).collect();
    let targets = softmax(&random_matrix(&mut rng, n, c, 1.0)).unwrap();
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.1).collect();
    let weights: Vec<f64> = raw.iter().map(|w| w / raw.iter().sum::<f64>()).collect();
    let uniform = vec![1.0 / n as f64; n];
    let mut fisher = Gradients::default();
    for &id in &slots {
        let p = model.param(id).unwrap();
        let data = (0..p.as_slice().len()).map(|_| rng.uniform()).collect();
        fisher.insert(id, Matrix::from_vec(p.rows(), p.cols(), data).unwrap());
    }
    let source = model.source().unwrap().clone();
    let base = model.forward_detached(&x, mode).unwrap();
    let pseudo = centroid_pseudo_labels(&base.features, &base.probs().unwrap()).unwrap();

    let objective = |m: &Model| -> (f64, Gradients) {
        let fwd = m.forward_detached(&x, mode).unwrap();
        let loss = match case {
            "tent" | "note" => mean_entropy(&fwd.logits).unwrap(),
            "eata" | "sar" => masked_entropy(&fwd.logits, &mask).unwrap(),
            "shot" => information_maximization(&fwd.logits)
                .unwrap()
                .add_scaled(&cross_entropy(&fwd.logits, &pseudo).unwrap(), 0.3)
                .unwrap(),
            "cotta" => soft_cross_entropy(&fwd.logits, &targets, &uniform).unwrap(),
            "rotta" => soft_cross_entropy(&fwd.logits, &targets, &weights).unwrap(),
            other => panic!("unknown case {other}"),
        };
        let mut g = fwd.grad(&loss, &slots).unwrap();
        let mut value = loss.value;
        if case == "eata" {
            let (v, a) = fisher_anchor(m, &fisher, &source, 1.3, &slots).unwrap();
            value += v;
            for (id, am) in a.iter() {
                let gm = g.get_mut(id).unwrap();
                for (d, e) in gm.as_mut_slice().iter_mut().zip(am.as_slice()) {
                    *d += e;
                }
            }
        }
        (value, g)
    };
    let (_, analytic) = objective(&model);
    let numeric = finite_difference(&model, &slots, FD_STEP, |m| objective(m).0);
    max_relative_error(&analytic, &numeric, FD_FLOOR)
}

/// Worst `|production − brute force|` MMD² over `pairs` random sample pairs
/// with m, n ≤ 50, alternating estimators and bandwidth rules.
pub fn mmd_oracle_worst(pairs: u64) -> f64 {
    use ttabench::similarity::{mmd_squared, similarity_score, Bandwidth, Estimator, MmdConfig};
    let mut worst: f64 = 0.0;
    for seed in 0..pairs {
        let mut rng = Rng::new(seed);
        let d = 1 + rng.below(6);
        let (m, n) = (2 + rng.below(49), 2 + rng.below(49));
        let x = random_matrix(&mut rng, m, d, 1.0);
        let spread = 1.0 + rng.uniform();
        let shift = rng.uniform();
        let y = random_matrix(&mut rng, n, d, spread).map(|v| v + shift);
        let unbiased = seed % 2 == 1;
        let bandwidth = if seed % 4 < 2 {
            Bandwidth::Fixed(0.3 + 3.0 * rng.uniform())
        } else {
            Bandwidth::Median
        };
        let cfg = MmdConfig {
            bandwidth,
            estimator: if unbiased { Estimator::Unbiased } else { Estimator::Biased },
            max_samples: 2000,
        };
        let sigma = similarity_score(&x, &y, &cfg).unwrap().bandwidth;
        let got = mmd_squared(&x, &y, &cfg).unwrap();
        worst = worst.max((got - brute_force_mmd2(&x, &y, sigma, unbiased)).abs());
    }
    worst
}

/// Fixed bandwidth for the offset and self-split checks: wide enough that
/// the biased estimator's finite-sample floor stays below `1 − 0.98`.
pub const SIMILARITY_SIGMA: f64 = 20.0;

/// `S(source, source + offset)` on the default base domain with `n`
/// samples per side.
pub fn offset_scores(offsets: &[f64], n: usize, seed: u64) -> Vec<f64> {
    use ttabench::harness::{base_domain, BenchConfig};
    use ttabench::shiftlab::{derive_target, sample_domain, ShiftTransform};
    use ttabench::similarity::{similarity_score, MmdConfig};
    let cfg = BenchConfig::default();
    let spec = base_domain(&cfg, seed).unwrap();
    let root = Rng::new(seed);
    let x = sample_domain(&spec, n, &mut root.split_named("x")).unwrap().features;
    let dir = ShiftTransform::random_offset(spec.dim(), 1.0, &mut root.split_named("dir"));
    offsets
        .iter()
        .map(|&o| {
            let mut t = dir.clone();
            t.offset.iter_mut().for_each(|v| *v *= o);
            let target = derive_target(&spec, &t, 0.0).unwrap();
            let y = sample_domain(&target, n, &mut root.split_named("y")).unwrap().features;
            similarity_score(&x, &y, &MmdConfig::fixed(SIMILARITY_SIGMA)).unwrap().score
        })
        .collect()
}

/// S between the two halves of a random split of `n` base-domain samples.
pub fn self_split_score(n: usize, seed: u64) -> f64 {
    use ttabench::harness::{base_domain, BenchConfig};
    use ttabench::shiftlab::sample_domain;
    use ttabench::similarity::{similarity_score, MmdConfig};
    let spec = base_domain(&BenchConfig::default(), seed).unwrap();
    let mut rng = Rng::new(seed).split_named("self-split");
    let data = sample_domain(&spec, n, &mut rng).unwrap();
    let perm = rng.permutation(n);
    let a = data.features.select_rows(&perm[..n / 2]);
    let b = data.features.select_rows(&perm[n / 2..]);
    similarity_score(&a, &b, &MmdConfig::fixed(SIMILARITY_SIGMA)).unwrap().score
}

/// Pretrained source models plus a shifted target stream, small enough for
/// integration tests.
pub struct Fixture {
    pub cfg: ttabench::harness::BenchConfig,
    pub source: ttabench::harness::SourceBundle,
    pub stream: Vec<ttabench::shiftlab::Dataset>,
}

impl Fixture {
    /// Small config: 1000 source samples, 15 epochs, 480 target samples.
    pub fn small_config() -> ttabench::harness::BenchConfig {
        let mut cfg = ttabench::harness::BenchConfig::default();
        cfg.data.source_samples = 1000;
        cfg.data.target_samples = 480;
        cfg.data.similarity_samples = 200;
        cfg.pretrain.epochs = 15;
        cfg
    }

    pub fn build(seed: u64, scenario: &str) -> Fixture {
        let cfg = Self::small_config();
        let sc = cfg
            .scenarios()
            .into_iter()
            .find(|s| s.name == scenario)
            .unwrap_or_else(|| panic!("no scenario {scenario}"));
        Self::from_scenario(cfg, &sc, seed)
    }

    pub fn from_scenario(
        cfg: ttabench::harness::BenchConfig,
        scenario: &ttabench::harness::ScenarioConfig,
        seed: u64,
    ) -> Fixture {
        use ttabench::harness::{SourceBundle, TargetBundle};
        let source = SourceBundle::build(&cfg, &scenario.sources, seed, true).unwrap();
        let stream = TargetBundle::build(&cfg, scenario, &source, seed).unwrap().stream;
        Fixture { cfg, source, stream }
    }

    pub fn model(&self, kind: NormKind) -> Model {
        self.source.model_for(kind).unwrap()
    }

    pub fn run(&self, adapter: &mut dyn ttabench::adapters::Adapter) -> Vec<Matrix> {
        self.stream.iter().map(|b| adapter.step(&b.features).unwrap()).collect()
    }
}

/// EATA with both filters disabled and no anchor against TENT: predictions
/// and final parameters compared bit for bit.
pub fn eata_reduces_to_tent(f: &Fixture, lr: f64) -> bool {
    use ttabench::adapters::{Adapter, Eata, EataConfig, Tent};
    let cfg = EataConfig {
        e0: Some(f64::INFINITY),
        epsilon: 2.0,
        fisher_lambda: 0.0,
        ..EataConfig::default()
    };
    let model = f.model(NormKind::LayerNorm);
    let mut eata = Eata::new(model.clone(), &cfg, lr, &f.source.val, false).unwrap();
    let mut tent = Tent::new(model, lr, None, false).unwrap();
    f.run(&mut eata) == f.run(&mut tent) && params_equal(eata.model(), tent.model(), &tent.model().param_ids())
}

/// SAR with ρ = 0 against TENT filtered at SAR's entropy margin.
pub fn sar_reduces_to_filtered_tent(f: &Fixture, lr: f64) -> bool {
    use ttabench::adapters::{Adapter, Sar, SarConfig, Tent};
    let cfg = SarConfig {
        rho: 0.0,
        ..SarConfig::default()
    };
    let model = f.model(NormKind::LayerNorm);
    let mut sar = Sar::new(model.clone(), &cfg, lr, false).unwrap();
    let mut tent = Tent::new(model, lr, Some(sar.margin()), false).unwrap();
    f.run(&mut sar) == f.run(&mut tent) && params_equal(sar.model(), tent.model(), &tent.model().param_ids())
}

/// CoTTA with restore probability 1: the student equals θ₀ after every step.
pub fn cotta_full_restore_pins_source(f: &Fixture, lr: f64) -> bool {
    use ttabench::adapters::{Adapter, Cotta, CottaConfig};
    let cfg = CottaConfig {
        restore_prob: 1.0,
        ..CottaConfig::default()
    };
    let model = f.model(NormKind::LayerNorm);
    let source = model.snapshot();
    let mut cotta = Cotta::new(model, &cfg, lr, false, Rng::new(3)).unwrap();
    f.stream.iter().all(|b| {
        cotta.step(&b.features).unwrap();
        cotta.pair().student.snapshot() == source
    })
}

/// T3A over the whole stream leaves the model bit-identical.
pub fn t3a_leaves_model_untouched(f: &Fixture) -> bool {
    use ttabench::adapters::{Adapter, T3a};
    let model = f.model(NormKind::LayerNorm);
    let mut t3a = T3a::new(model.clone(), 20).unwrap();
    f.run(&mut t3a);
    t3a.model() == &model
}

pub fn params_equal(a: &Model, b: &Model, slots: &[ParamId]) -> bool {
    slots.iter().all(|&id| a.param(id).unwrap().as_slice() == b.param(id).unwrap().as_slice())
}
