//! Run configuration.
//!
//! A TOML file with every section optional. Unknown keys are rejected.
//! Relative paths resolve against the directory holding the file.
//! `PC_LLM_URL` and `PC_EMBED_URL` override the provider URLs.

use std::path::{Path, PathBuf};

use prefchain_core::calibration::GenerationParams;
use prefchain_core::embedding::DEFAULT_DIMENSION;
use prefchain_core::metrics::DEFAULT_EPSILON;
use prefchain_core::mobility::{DEFAULT_GRID_SIZE, DEFAULT_POIS_PER_CATEGORY, DEFAULT_SPACING_METERS};
use prefchain_core::pipeline::ChainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const LLM_URL_ENV: &str = "PC_LLM_URL";
pub const EMBED_URL_ENV: &str = "PC_EMBED_URL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub embedding: EmbeddingSettings,
    pub llm: LlmSettings,
    pub generation: GenerationParams,
    pub chain: ChainConfig,
    pub evaluation: EvaluationSettings,
    pub sweep: SweepSettings,
    pub simulation: SimulationSettings,
    pub synthetic: SyntheticSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub reference: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    /// Street network JSON. A seeded grid city is used when absent.
    pub city: Option<PathBuf>,
    /// Snapshot written by build-graph and read instead of the reference
    /// CSV when present.
    pub graph: Option<PathBuf>,
    /// Choices simulated by an outside predictor, in the trip CSV format,
    /// scored by evaluate alongside the chain.
    pub predictions: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { reference: None, validation: None, city: None, graph: None, predictions: None, out: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSettings {
    /// Use the local hash embedder instead of the remote service.
    pub mock: bool,
    pub url: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    /// Fall back to the hash embedder when the service cannot be reached.
    pub fallback_to_hash: bool,
    pub dimension: usize,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            mock: true,
            url: None,
            model: "mxbai-embed-large".into(),
            timeout_secs: 30,
            fallback_to_hash: false,
            dimension: DEFAULT_DIMENSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSettings {
    /// Use the identity mock, which returns the prior unchanged.
    pub mock: bool,
    pub url: Option<String>,
    pub timeout_secs: u64,
    /// Concurrent agents in flight.
    pub max_in_flight: usize,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self { mock: true, url: None, timeout_secs: 120, max_in_flight: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSettings {
    pub epsilon: f64,
    /// Also report the uniform and marginal predictors.
    pub baselines: bool,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, baselines: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub sizes: Vec<usize>,
    pub seeds: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { sizes: vec![10, 20, 50, 100, 200], seeds: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSettings {
    pub agents: usize,
    pub grid_size: u32,
    pub spacing_meters: f64,
    pub pois_per_category: u32,
    /// Free-text conditions passed to calibration.
    pub context: String,
    /// Reference tallies to compare against, in the exported CSV formats.
    pub reference_edges: Option<PathBuf>,
    pub reference_pois: Option<PathBuf>,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            agents: 100,
            grid_size: DEFAULT_GRID_SIZE,
            spacing_meters: DEFAULT_SPACING_METERS,
            pois_per_category: DEFAULT_POIS_PER_CATEGORY,
            context: String::new(),
            reference_edges: None,
            reference_pois: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSettings {
    /// Synthetic population spec (JSON or TOML). The built-in strongly
    /// conditioned spec is used when absent.
    pub spec: Option<PathBuf>,
    pub size: usize,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self { spec: None, size: 1000 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for path in [&mut p.reference, &mut p.validation, &mut p.city, &mut p.graph, &mut p.predictions].into_iter().flatten() {
            fix(path);
        }
        fix(&mut p.out);
        let s = &mut self.simulation;
        for path in [&mut s.reference_edges, &mut s.reference_pois].into_iter().flatten() {
            fix(path);
        }
        if let Some(spec) = &mut self.synthetic.spec {
            fix(spec);
        }
    }

    /// Applies URL overrides from `lookup` (normally the process
    /// environment). An override URL also turns its mock off.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(url) = lookup(LLM_URL_ENV).filter(|u| !u.is_empty()) {
            self.llm.url = Some(url);
            self.llm.mock = false;
        }
        if let Some(url) = lookup(EMBED_URL_ENV).filter(|u| !u.is_empty()) {
            self.embedding.url = Some(url);
            self.embedding.mock = false;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.chain.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !self.embedding.mock && self.embedding.url.is_none() {
            return bad("embedding.url is required unless embedding.mock is set".into());
        }
        if !self.llm.mock && self.llm.url.is_none() {
            return bad("llm.url is required unless llm.mock is set".into());
        }
        if self.embedding.dimension < prefchain_core::embedding::MIN_HASH_DIMENSION {
            return bad(format!(
                "embedding.dimension must be at least {}",
                prefchain_core::embedding::MIN_HASH_DIMENSION
            ));
        }
        if self.llm.max_in_flight == 0 {
            return bad("llm.max_in_flight must be at least 1".into());
        }
        if self.embedding.timeout_secs == 0 || self.llm.timeout_secs == 0 {
            return bad("timeouts must be at least one second".into());
        }
        if !(self.evaluation.epsilon > 0.0 && self.evaluation.epsilon.is_finite()) {
            return bad("evaluation.epsilon must be positive".into());
        }
        if self.sweep.sizes.is_empty() || self.sweep.sizes.contains(&0) || self.sweep.seeds == 0 {
            return bad("sweep needs positive sizes and at least one seed".into());
        }
        let sim = &self.simulation;
        if sim.grid_size < 2 || !(sim.spacing_meters > 0.0 && sim.spacing_meters.is_finite()) {
            return bad("simulation grid needs at least 2×2 nodes and positive spacing".into());
        }
        let g = &self.generation;
        if !(g.temperature >= 0.0 && (0.0..=1.0).contains(&g.top_p) && g.repeat_penalty > 0.0) {
            return bad("generation parameters out of range".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the resolved configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).unwrap_or_default();
        hex::encode(Sha256::digest(&canonical))
    }
}
