use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, Method};
use crate::error::{Error, Result};
use crate::model::{NormKind, PretrainConfig};
use crate::numcore::Rng;
use crate::shiftlab::{PlaneRotation, ShiftTransform, StreamOrder, StreamSpec};

/// Run-config schema version understood by this build.
pub const CONFIG_VERSION: u32 = 1;

/// How a domain is moved away from the shared base domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    /// Euclidean length of a mean offset along a seeded random direction.
    pub offset: f64,
    pub rotations: Vec<PlaneRotation>,
    pub scale: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            offset: 0.0,
            rotations: Vec::new(),
            scale: 1.0,
        }
    }
}

impl ShiftConfig {
    pub fn offset(offset: f64) -> Self {
        ShiftConfig {
            offset,
            ..ShiftConfig::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.offset == 0.0 && self.rotations.is_empty() && self.scale == 1.0
    }

    /// Concrete transform; the offset direction comes from `rng`.
    pub fn realize(&self, dim: usize, rng: &mut Rng) -> ShiftTransform {
        let mut t = if self.offset == 0.0 {
            ShiftTransform::identity(dim)
        } else {
            ShiftTransform::random_offset(dim, self.offset, rng)
        };
        t.rotations = self.rotations.clone();
        t.scale = self.scale;
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub shift: ShiftConfig,
    #[serde(default)]
    pub label_noise: f64,
}

impl SourceConfig {
    pub fn base() -> Self {
        SourceConfig {
            name: None,
            shift: ShiftConfig::default(),
            label_noise: 0.0,
        }
    }
}

/// One source → target row of the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Training domains; several are pooled before pretraining.
    #[serde(default = "default_sources")]
    pub sources: Vec<SourceConfig>,
    #[serde(default)]
    pub target: ShiftConfig,
    #[serde(default)]
    pub target_noise: f64,
    #[serde(default = "default_stream")]
    pub stream: StreamSpec,
}

fn default_sources() -> Vec<SourceConfig> {
    vec![SourceConfig::base()]
}

fn default_stream() -> StreamSpec {
    StreamSpec::iid(16)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("scenario needs a name".into()));
        }
        if self.sources.is_empty() {
            return Err(Error::Config(format!("scenario {}: at least one source", self.name)));
        }
        if !(0.0..1.0).contains(&self.target_noise) {
            return Err(Error::Config(format!(
                "scenario {}: target label noise {} outside [0, 1)",
                self.name, self.target_noise
            )));
        }
        self.stream
            .validate()
            .map_err(|e| Error::Config(format!("scenario {}: {e}", self.name)))
    }
}

/// Shape of the synthetic base domain all scenarios derive from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    /// Expected distance between two class means.
    pub separation: f64,
    pub cov_scale: f64,
    /// Samples drawn per source domain (split 80/20 into train/val).
    pub source_samples: usize,
    pub target_samples: usize,
    pub train_fraction: f64,
    /// Fresh samples per side for the similarity score.
    pub similarity_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 7,
            dim: 16,
            separation: 4.0,
            cov_scale: 1.0,
            source_samples: 2000,
            target_samples: 8000,
            train_fraction: 0.8,
            similarity_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: vec![64, 64] }
    }
}

/// Full benchmark description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Overrides of the normalization each method runs with.
    #[serde(default)]
    pub norms: BTreeMap<Method, NormKind>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub adapters: AdapterConfig,
    /// Explicit scenarios; empty means the default suite.
    #[serde(default)]
    pub scenarios: Vec<ScenarioConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            version: CONFIG_VERSION,
            seeds: default_seeds(),
            methods: default_methods(),
            norms: BTreeMap::new(),
            data: DataConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            adapters: AdapterConfig::default(),
            scenarios: Vec::new(),
        }
    }
}

/// Offsets × target noise × stream order: twelve scenarios.
pub fn default_suite() -> Vec<ScenarioConfig> {
    let mut out = Vec::new();
    for offset in [0.5, 1.5, 3.0] {
        for noise in [0.0, 0.3] {
            for order in [StreamOrder::Iid, StreamOrder::ClassCorrelated] {
                let (stream, tag) = match order {
                    StreamOrder::Iid => (StreamSpec::iid(16), "iid"),
                    StreamOrder::ClassCorrelated => (StreamSpec::correlated(64, 16), "corr"),
                };
                out.push(ScenarioConfig {
                    name: format!("off{offset}-noise{noise}-{tag}"),
                    sources: default_sources(),
                    target: ShiftConfig::offset(offset),
                    target_noise: noise,
                    stream,
                });
            }
        }
    }
    out
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Configured scenarios, or the default suite when none are listed.
    pub fn scenarios(&self) -> Vec<ScenarioConfig> {
        if self.scenarios.is_empty() {
            default_suite()
        } else {
            self.scenarios.clone()
        }
    }

    pub fn norm_for(&self, method: Method) -> NormKind {
        self.norms.get(&method).copied().unwrap_or(method.default_norm())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} (this build reads version {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method".into()));
        }
        let d = &self.data;
        if d.classes < 2 || d.dim == 0 || d.source_samples < 2 || d.target_samples == 0 {
            return Err(Error::Config(format!("data section {d:?}")));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config(format!("train fraction {}", d.train_fraction)));
        }
        if !(d.separation > 0.0) || !(d.cov_scale > 0.0) || d.similarity_samples < 2 {
            return Err(Error::Config(format!("data section {d:?}")));
        }
        for (&m, &k) in &self.norms {
            let ok = match m {
                Method::Note => k == NormKind::Iabn,
                Method::Rotta => k == NormKind::Rbn,
                _ => true,
            };
            if !ok {
                return Err(Error::Config(format!("{m} cannot run with {k:?}")));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for s in self.scenarios() {
            s.validate()?;
            if !names.insert(s.name.clone()) {
                return Err(Error::Config(format!("duplicate scenario {}", s.name)));
            }
        }
        Ok(())
    }
}
