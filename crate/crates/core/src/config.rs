//! Declarative run configuration (TOML) and per-stage content hashes.
//!
//! Every field has a default and unknown keys are rejected. Stage seeds are
//! not read from their sections: [`RunConfig::resolve`] derives them from the
//! global `seed` so one value reproduces the whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::GraphConfig;
use crate::model::ModelConfig;
use crate::phantom::PhantomSpec;
use crate::saliency::SaliencyConfig;
use crate::seed;
use crate::signal::{VqVaeArch, VqVaeTrainConfig};
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const CACHE_ENV: &str = "HIPERGRAPH_CACHE";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqVaeSection {
    pub arch: VqVaeArch,
    pub train: VqVaeTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub bootstrap_resamples: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            bootstrap_resamples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Generated cohort (NIfTI volumes and manifest).
    pub data_root: PathBuf,
    /// Trained codebook and built graphs.
    pub cache_dir: PathBuf,
    /// Checkpoints, logs, metrics and saliency maps.
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            cache_dir: "cache".into(),
            output_dir: "output".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub config_version: u32,
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub vqvae: VqVaeSection,
    pub graphs: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub evaluation: EvaluationConfig,
    pub saliency: SaliencyConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            seed: 0,
            phantom: PhantomSpec::default(),
            vqvae: VqVaeSection::default(),
            graphs: GraphConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            evaluation: EvaluationConfig::default(),
            saliency: SaliencyConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn hash_of(parts: &[serde_json::Value]) -> String {
    seed::hash_hex(serde_json::Value::Array(parts.to_vec()).to_string().as_bytes())
}

fn j<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

impl RunConfig {
    pub fn from_toml_str(s: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Configuration(format!("{}: {}", origin.display(), e.message())))?;
        if cfg.config_version != CONFIG_VERSION {
            return Err(Error::Configuration(format!(
                "{}: config_version {} is not supported (expected {CONFIG_VERSION})",
                origin.display(),
                cfg.config_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Apply derived stage seeds and the cache-directory override.
    pub fn resolve(mut self, cache_override: Option<PathBuf>) -> Self {
        let s = self.seed;
        self.phantom.seed = seed::derive(s, "phantom");
        self.vqvae.train.seed = seed::derive(s, "vqvae");
        self.train.seed = seed::derive(s, "hgnn");
        if let Some(dir) = cache_override {
            self.paths.cache_dir = dir;
        }
        self
    }

    /// [`resolve`](Self::resolve) with `HIPERGRAPH_CACHE` as the override.
    pub fn resolve_from_env(self) -> Self {
        let dir = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
        self.resolve(dir)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.vqvae.arch.validate()?;
        self.graphs.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.saliency.validate()?;
        if self.evaluation.bootstrap_resamples == 0 {
            return Err(Error::param("bootstrap_resamples must be positive"));
        }
        if self.model.num_classes != 2 {
            return Err(Error::Configuration(
                "the phantom cohort is binary; model.num_classes must be 2".into(),
            ));
        }
        Ok(())
    }

    pub fn phantom_hash(&self) -> String {
        hash_of(&[j(&"phantom"), j(&self.phantom)])
    }

    pub fn vqvae_hash(&self) -> String {
        hash_of(&[j(&"vqvae"), j(&self.phantom_hash()), j(&self.vqvae)])
    }

    pub fn graphs_hash(&self) -> String {
        hash_of(&[j(&"graphs"), j(&self.vqvae_hash()), j(&self.graphs)])
    }

    pub fn hgnn_hash(&self) -> String {
        hash_of(&[j(&"hgnn"), j(&self.graphs_hash()), j(&self.model), j(&self.train), j(&self.seed)])
    }

    pub fn evaluation_hash(&self) -> String {
        hash_of(&[j(&"evaluate"), j(&self.hgnn_hash()), j(&self.evaluation), j(&self.seed)])
    }

    pub fn saliency_hash(&self) -> String {
        hash_of(&[j(&"saliency"), j(&self.hgnn_hash()), j(&self.saliency)])
    }
}
