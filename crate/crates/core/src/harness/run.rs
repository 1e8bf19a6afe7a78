use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use crate::adapters::{build_adapter, Adapter, Method};
use crate::error::{Error, Result};
use crate::harness::config::{BenchConfig, ScenarioConfig, SourceConfig};
use crate::model::{pretrain, LabeledView, Model, ModelConfig, NormKind};
use crate::numcore::{entropy, Matrix, Rng};
use crate::shiftlab::{derive_target, make_stream, sample_domain, Dataset, DomainSpec};
use crate::similarity::{similarity_score, MmdConfig, SimilarityResult};

/// Outcome of streaming one method over one scenario with one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub method: Method,
    pub seed: u64,
    pub norm: NormKind,
    /// Top-1 accuracy against the observed target labels.
    pub accuracy: Option<f64>,
    /// Top-1 accuracy against the true target labels.
    pub accuracy_true: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub similarity: f64,
    pub samples: usize,
    pub batches: usize,
    /// Predicted-class histogram over the stream.
    pub prediction_counts: Vec<usize>,
    /// Median wall-clock per batch after warm-up. Not part of the CSV.
    pub ms_per_batch: Option<f64>,
    pub failed: bool,
    pub error: Option<String>,
}

/// Pretrained source models for one seed.
#[derive(Clone, Debug)]
pub struct SourceBundle {
    pub spec: Vec<DomainSpec>,
    pub train: Dataset,
    pub val: Dataset,
    pub layer_norm: Model,
    pub layer_norm_val_accuracy: f64,
    /// Batch-norm model for methods needing batch-statistics layers.
    pub batch_norm: Option<Model>,
    pub batch_norm_val_accuracy: Option<f64>,
}

/// Target domain, its stream, and its similarity to the source.
#[derive(Clone, Debug)]
pub struct TargetBundle {
    pub spec: DomainSpec,
    pub data: Dataset,
    pub stream: Vec<Dataset>,
    pub similarity: SimilarityResult,
}

pub fn base_domain(cfg: &BenchConfig, seed: u64) -> Result<DomainSpec> {
    let d = &cfg.data;
    DomainSpec::generate(
        "base",
        d.classes,
        d.dim,
        d.separation,
        d.cov_scale,
        0.0,
        &mut Rng::new(seed).split_named("base"),
    )
}

/// Source domains of a scenario for `seed`.
pub fn source_specs(cfg: &BenchConfig, sources: &[SourceConfig], seed: u64) -> Result<Vec<DomainSpec>> {
    let base = base_domain(cfg, seed)?;
    let root = Rng::new(seed);
    sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = s.shift.realize(cfg.data.dim, &mut root.split_named(&format!("source/{i}")));
            let mut spec = derive_target(&base, &t, s.label_noise)?;
            spec.name = s.name.clone().unwrap_or_else(|| format!("source{i}"));
            Ok(spec)
        })
        .collect()
}

fn model_config(cfg: &BenchConfig, norm: NormKind) -> ModelConfig {
    ModelConfig {
        input_dim: cfg.data.dim,
        hidden: cfg.model.hidden.clone(),
        classes: cfg.data.classes,
        norm,
    }
}

fn train_model(cfg: &BenchConfig, train: &Dataset, val: &Dataset, norm: NormKind, rng: &Rng) -> Result<(Model, f64)> {
    let tag = format!("{norm:?}");
    let mut model = Model::new(&model_config(cfg, norm), &mut rng.split_named(&format!("init/{tag}")))?;
    let outcome = pretrain(
        &mut model,
        LabeledView::new(&train.features, &train.observed)?,
        LabeledView::new(&val.features, &val.observed)?,
        &cfg.pretrain,
        &mut rng.split_named(&format!("pretrain/{tag}")),
    )?;
    debug!(?norm, val_accuracy = outcome.val_accuracy, "pretrained");
    Ok((model, outcome.val_accuracy))
}

impl SourceBundle {
    /// Samples every source domain, pools and splits them, and pretrains a
    /// LayerNorm model (plus a BatchNorm one when `with_batch_norm`).
    pub fn build(cfg: &BenchConfig, sources: &[SourceConfig], seed: u64, with_batch_norm: bool) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Config("at least one source".into()));
        }
        let root = Rng::new(seed);
        let spec = source_specs(cfg, sources, seed)?;
        let parts = sample_sources(cfg, &spec, seed)?;
        let pooled = Dataset::concat(&parts.iter().collect::<Vec<_>>())?;
        let order = root.split_named("source-split").permutation(pooled.len());
        let (train, val) = pooled.select(&order).split(cfg.data.train_fraction);
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("source split leaves an empty side".into()));
        }
        let (layer_norm, ln_acc) = train_model(cfg, &train, &val, NormKind::LayerNorm, &root)?;
        let (batch_norm, bn_acc) = if with_batch_norm {
            let (m, a) = train_model(cfg, &train, &val, NormKind::BatchNorm, &root)?;
            (Some(m), Some(a))
        } else {
            (None, None)
        };
        Ok(SourceBundle {
            spec,
            train,
            val,
            layer_norm,
            layer_norm_val_accuracy: ln_acc,
            batch_norm,
            batch_norm_val_accuracy: bn_acc,
        })
    }

    /// Source θ₀ with the requested normalization. Batch-statistics kinds
    /// start from the BatchNorm model.
    pub fn model_for(&self, norm: NormKind) -> Result<Model> {
        match norm {
            NormKind::LayerNorm => Ok(self.layer_norm.clone()),
            kind => {
                let mut m = self
                    .batch_norm
                    .clone()
                    .ok_or_else(|| Error::invalid("no batch-norm source model was trained"))?;
                m.convert_norm(kind)?;
                Ok(m)
            }
        }
    }
}

/// One dataset per source domain, as used for pretraining.
pub fn sample_sources(cfg: &BenchConfig, specs: &[DomainSpec], seed: u64) -> Result<Vec<Dataset>> {
    let root = Rng::new(seed);
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| sample_domain(s, cfg.data.source_samples, &mut root.split_named(&format!("source-data/{i}"))))
        .collect()
}

/// Target domain of a scenario for `seed`.
pub fn target_spec(cfg: &BenchConfig, scenario: &ScenarioConfig, seed: u64) -> Result<DomainSpec> {
    let base = base_domain(cfg, seed)?;
    let t = scenario.target.realize(cfg.data.dim, &mut Rng::new(seed).split_named("target"));
    let mut spec = derive_target(&base, &t, scenario.target_noise)?;
    spec.name = format!("target:{}", scenario.name);
    Ok(spec)
}

/// The target samples a scenario streams for `seed`.
pub fn sample_target(cfg: &BenchConfig, spec: &DomainSpec, seed: u64) -> Result<Dataset> {
    sample_domain(spec, cfg.data.target_samples, &mut Rng::new(seed).split_named("target-data"))
}

impl TargetBundle {
    pub fn build(cfg: &BenchConfig, scenario: &ScenarioConfig, source: &SourceBundle, seed: u64) -> Result<Self> {
        let root = Rng::new(seed);
        let spec = target_spec(cfg, scenario, seed)?;
        let data = sample_target(cfg, &spec, seed)?;
        let stream = make_stream(&data, &scenario.stream, &mut root.split_named("stream"))?;

        let n = cfg.data.similarity_samples;
        let k = source.spec.len();
        let mut rng = root.split_named("similarity");
        let mut parts = Vec::with_capacity(k);
        for (i, s) in source.spec.iter().enumerate() {
            let share = n / k + usize::from(i < n % k);
            parts.push(sample_domain(s, share.max(1), &mut rng)?);
        }
        let src = Dataset::concat(&parts.iter().collect::<Vec<_>>())?;
        let tgt = sample_domain(&spec, n, &mut rng)?;
        let similarity = feature_similarity(&source.layer_norm, &src.features, &tgt.features)?;
        Ok(TargetBundle {
            spec,
            data,
            stream,
            similarity,
        })
    }
}

/// S between two input sets, measured on `model`'s encoder features.
pub fn feature_similarity(model: &Model, x: &Matrix, y: &Matrix) -> Result<SimilarityResult> {
    let fx = model.infer(x)?.features;
    let fy = model.infer(y)?.features;
    similarity_score(&fx, &fy, &MmdConfig::default())
}

fn median_ms(times: &[f64]) -> Option<f64> {
    let warm = if times.len() > 3 { &times[3..] } else { times };
    if warm.is_empty() {
        return None;
    }
    let mut v = warm.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Median wall-clock milliseconds per batch, the first three batches
/// excluded as warm-up. Returns `None` for an empty stream.
pub fn measure_latency(adapter: &mut dyn Adapter, stream: &[Dataset]) -> Result<Option<f64>> {
    let mut times = Vec::with_capacity(stream.len());
    for b in stream {
        let t0 = Instant::now();
        adapter.step(&b.features)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median_ms(&times))
}

struct Tally {
    hits: usize,
    hits_true: usize,
    entropy: f64,
    counts: Vec<usize>,
    samples: usize,
    times: Vec<f64>,
}

fn stream_method(adapter: &mut dyn Adapter, stream: &[Dataset], classes: usize) -> Result<Tally> {
    let mut t = Tally {
        hits: 0,
        hits_true: 0,
        entropy: 0.0,
        counts: vec![0; classes],
        samples: 0,
        times: Vec::with_capacity(stream.len()),
    };
    for b in stream {
        let t0 = Instant::now();
        let probs = adapter.step(&b.features)?;
        t.times.push(t0.elapsed().as_secs_f64() * 1e3);
        if probs.shape() != (b.len(), classes) {
            return Err(Error::shape(format!("adapter returned {:?} predictions", probs.shape())));
        }
        for (i, (p, h)) in probs.argmax_rows().into_iter().zip(entropy(&probs)?).enumerate() {
            t.hits += usize::from(p == b.observed[i]);
            t.hits_true += usize::from(p == b.truth[i]);
            t.counts[p] += 1;
            t.entropy += h;
        }
        t.samples += b.len();
    }
    Ok(t)
}

/// Streams `method` once over the target, starting from the source model.
pub fn run_method(
    cfg: &BenchConfig,
    scenario: &ScenarioConfig,
    source: &SourceBundle,
    target: &TargetBundle,
    method: Method,
    seed: u64,
) -> RunReport {
    let norm = cfg.norm_for(method);
    let mut report = RunReport {
        scenario: scenario.name.clone(),
        method,
        seed,
        norm,
        accuracy: None,
        accuracy_true: None,
        mean_entropy: None,
        similarity: target.similarity.score,
        samples: target.data.len(),
        batches: target.stream.len(),
        prediction_counts: Vec::new(),
        ms_per_batch: None,
        failed: false,
        error: None,
    };
    let rng = Rng::new(seed).split_named(&format!("adapter/{method}"));
    let outcome = source.model_for(norm).and_then(|model| {
        let mut adapter = build_adapter(method, model, &cfg.adapters, Some(&source.val), rng)?;
        stream_method(adapter.as_mut(), &target.stream, cfg.data.classes)
    });
    match outcome {
        Ok(t) => {
            let n = t.samples as f64;
            report.accuracy = Some(t.hits as f64 / n);
            report.accuracy_true = Some(t.hits_true as f64 / n);
            report.mean_entropy = Some(t.entropy / n);
            report.prediction_counts = t.counts;
            report.ms_per_batch = median_ms(&t.times);
        }
        Err(e) => {
            warn!(scenario = %scenario.name, %method, seed, error = %e, "run failed");
            report.failed = true;
            report.error = Some(e.to_string());
        }
    }
    report
}

fn needs_batch_norm(cfg: &BenchConfig, methods: &[Method]) -> bool {
    methods.iter().any(|&m| cfg.norm_for(m) != NormKind::LayerNorm)
}

/// Every method on one scenario for each configured seed.
pub fn run_scenario(cfg: &BenchConfig, scenario: &ScenarioConfig, methods: &[Method]) -> Result<Vec<RunReport>> {
    let mut cfg = cfg.clone();
    cfg.scenarios = vec![scenario.clone()];
    cfg.methods = methods.to_vec();
    run_bench(&cfg)
}

/// The full scenario × method × seed grid. Reports come back ordered by
/// scenario (config order), method (config order), then seed.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    let scenarios = cfg.scenarios();
    let with_bn = needs_batch_norm(cfg, &cfg.methods);

    // Scenarios sharing their sources share the pretrained models.
    let mut source_keys: Vec<String> = Vec::new();
    let mut scenario_source = Vec::with_capacity(scenarios.len());
    for s in &scenarios {
        let key = serde_json::to_string(&s.sources)?;
        let idx = source_keys.iter().position(|k| *k == key).unwrap_or_else(|| {
            source_keys.push(key);
            source_keys.len() - 1
        });
        scenario_source.push(idx);
    }
    let source_jobs: Vec<(usize, u64)> = (0..source_keys.len())
        .flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let sources: BTreeMap<(usize, u64), SourceBundle> = source_jobs
        .par_iter()
        .map(|&(i, seed)| {
            let owner = scenario_source.iter().position(|&k| k == i).expect("key has a scenario");
            let b = SourceBundle::build(cfg, &scenarios[owner].sources, seed, with_bn)?;
            info!(seed, val_accuracy = b.layer_norm_val_accuracy, "source models ready");
            Ok(((i, seed), b))
        })
        .collect::<Result<_>>()?;

    let target_jobs: Vec<(usize, u64)> = (0..scenarios.len())
        .flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let targets: BTreeMap<(usize, u64), TargetBundle> = target_jobs
        .par_iter()
        .map(|&(i, seed)| {
            let src = &sources[&(scenario_source[i], seed)];
            let t = TargetBundle::build(cfg, &scenarios[i], src, seed)?;
            info!(scenario = %scenarios[i].name, seed, similarity = t.similarity.score, "target ready");
            Ok(((i, seed), t))
        })
        .collect::<Result<_>>()?;

    let runs: Vec<(usize, Method, u64)> = (0..scenarios.len())
        .flat_map(|i| {
            cfg.methods
                .iter()
                .flat_map(move |&m| cfg.seeds.iter().map(move |&s| (i, m, s)))
        })
        .collect();
    Ok(runs
        .par_iter()
        .map(|&(i, method, seed)| {
            let src = &sources[&(scenario_source[i], seed)];
            let tgt = &targets[&(i, seed)];
            let r = run_method(cfg, &scenarios[i], src, tgt, method, seed);
            debug!(scenario = %r.scenario, %method, seed, accuracy = ?r.accuracy, "run done");
            r
        })
        .collect())
}
