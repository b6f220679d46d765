//! TOML run configuration.
//!
//! ```toml
//! seed = 7                      # required unless given with --seed
//! out = "runs/demo"             # relative to this file
//! dataset_spec = "dataset.toml" # optional, replaces [pipeline.dataset]
//! mode = "full"                 # concept sets: full | masked
//! scope = "misclassified"       # intervention curve: full | misclassified
//! port = 8080
//!
//! [pipeline]
//! n_concepts = 6
//! [pipeline.grader]
//! epochs = 15
//! [pipeline.tcav]
//! tap = "block3.out"
//! ```
//!
//! Every `[pipeline.*]` table accepts a subset of its fields; omitted fields
//! keep their defaults. Stage seeds are derived from the top-level seed.

use std::fs;
use std::path::{Path, PathBuf};

use conceptdr::cbm::Scope;
use conceptdr::pipeline::PipelineConfig;
use conceptdr::synthgen::{DatasetSpec, SetMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub dataset_spec: Option<PathBuf>,
    #[serde(default = "default_mode")]
    pub mode: SetMode,
    #[serde(default = "default_scope")]
    pub scope: Scope,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

fn default_mode() -> SetMode {
    SetMode::Full
}

fn default_scope() -> Scope {
    Scope::Misclassified
}

fn default_port() -> u16 {
    8080
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: None,
            dataset_spec: None,
            mode: default_mode(),
            scope: default_scope(),
            port: default_port(),
            pipeline: PipelineConfig::default(),
        }
    }
}

fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str, path: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_string(),
        message: e.to_string().trim_end().to_string(),
    })
}

impl RunConfig {
    /// Parses `text`; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, origin: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = parse_toml(text, origin)?;
        cfg.out = cfg.out.map(|p| base.join(p));
        if let Some(rel) = cfg.dataset_spec.take() {
            let path = base.join(rel);
            let spec_text = fs::read_to_string(&path).map_err(|source| ConfigError::Read {
                path: path.display().to_string(),
                source,
            })?;
            cfg.pipeline.dataset = parse_toml::<DatasetSpec>(&spec_text, &path.display().to_string())?;
            cfg.dataset_spec = Some(path);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, &path.display().to_string(), base)
    }

    /// Seed-propagated pipeline settings. Fails if no seed was given.
    pub fn resolve(&self) -> Result<PipelineConfig, ConfigError> {
        let seed = self
            .seed
            .ok_or_else(|| ConfigError::Invalid("no seed given: set `seed` in the config or pass --seed".into()))?;
        let pipeline = self.pipeline.clone().with_seed(seed);
        pipeline.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(pipeline)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
