use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{DEFAULT_MAX_STEP_TOKENS, DEFAULT_STOP_SEQUENCES, DEFAULT_TOP_K};
use crate::gating::{GatingConfig, InsertionPolicy, DEFAULT_TAU};
use crate::metrics::{ImageTokenEstimator, DEFAULT_FULL_IMAGE_TOKENS};
use crate::objectpool::FilterParams;
use crate::orchestrator::{Exemplar, OrchestratorConfig, PromptTemplate, DEFAULT_MAX_STEPS};

use super::HarnessError;

/// `tau = 0.3`, `tau = "always"` or `tau = "never"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauSetting {
    Value(f64),
    Sentinel(TauSentinel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSentinel {
    Always,
    Never,
}

impl Default for TauSetting {
    fn default() -> Self {
        TauSetting::Value(DEFAULT_TAU)
    }
}

impl TauSetting {
    pub fn policy(self) -> InsertionPolicy {
        match self {
            TauSetting::Value(tau) => InsertionPolicy::Gated { tau },
            TauSetting::Sentinel(TauSentinel::Always) => InsertionPolicy::Always,
            TauSetting::Sentinel(TauSentinel::Never) => InsertionPolicy::Never,
        }
    }

    pub fn from_policy(policy: InsertionPolicy) -> Self {
        match policy {
            InsertionPolicy::Gated { tau } => TauSetting::Value(tau),
            InsertionPolicy::Always => TauSetting::Sentinel(TauSentinel::Always),
            InsertionPolicy::Never => TauSetting::Sentinel(TauSentinel::Never),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shots {
    #[default]
    ZeroShot,
    OneShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caps {
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_max_step_tokens")]
    pub max_step_tokens: usize,
    #[serde(default)]
    pub max_insertions: Option<usize>,
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

fn default_max_step_tokens() -> usize {
    DEFAULT_MAX_STEP_TOKENS
}

impl Default for Caps {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            max_step_tokens: DEFAULT_MAX_STEP_TOKENS,
            max_insertions: None,
        }
    }
}

/// Network knobs shared by every HTTP-backed provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSettings {
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> u64 {
    500
}

fn default_timeout() -> u64 {
    120_000
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            timeout_ms: default_timeout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum BackendSettings {
    /// OpenAI-compatible chat completions with top-k log-probabilities.
    /// The credential comes from `ICOT_API_KEY`.
    Chat {
        url: String,
        model: String,
        #[serde(default)]
        temperature: Option<f64>,
    },
    /// Per-sample scripts. With `wire = true` the scripts are served through
    /// a fake chat endpoint so the real client code runs (and can be
    /// recorded and replayed).
    Scripted {
        scripts: PathBuf,
        #[serde(default)]
        wire: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum RelevanceSettings {
    Embedding {
        text_url: String,
        image_url: String,
        #[serde(default)]
        model: Option<String>,
        #[serde(default = "default_concurrency")]
        max_concurrency: usize,
    },
    /// Per-sample score tables.
    Scripted { tables: PathBuf },
}

fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum PoolSettings {
    /// Candidates keyed by sample id.
    Manifest { path: PathBuf },
    Service {
        url: String,
        #[serde(default = "default_concurrency")]
        max_in_flight: usize,
    },
    /// No candidates: every insertion decision falls back to text.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub tau: TauSetting,
    #[serde(default)]
    pub shots: Shots,
    #[serde(default)]
    pub exemplar: Option<Exemplar>,
    pub backend: BackendSettings,
    pub relevance: RelevanceSettings,
    pub pool: PoolSettings,
    #[serde(default)]
    pub filter: FilterParams,
    #[serde(default)]
    pub caps: Caps,
    #[serde(default)]
    pub network: NetworkSettings,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_stops")]
    pub stop_sequences: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_full_image_tokens")]
    pub full_image_tokens: u64,
    /// Prompt template; a file path in TOML is read at load time.
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default, skip_serializing)]
    pub template_file: Option<PathBuf>,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn default_stops() -> Vec<String> {
    DEFAULT_STOP_SEQUENCES.iter().map(|s| s.to_string()).collect()
}

fn default_workers() -> usize {
    4
}

fn default_full_image_tokens() -> u64 {
    DEFAULT_FULL_IMAGE_TOKENS
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn must_exist(p: &Path, what: &str) -> Result<(), HarnessError> {
    if p.exists() {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("{what} {} does not exist", p.display())))
    }
}

impl RunConfig {
    /// Parses TOML, resolves relative paths against `base_dir`, and validates.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(ex) = &mut cfg.exemplar {
            if let Some(p) = &mut ex.image_path {
                resolve(base_dir, p);
            }
        }
        match &mut cfg.backend {
            BackendSettings::Scripted { scripts, .. } => resolve(base_dir, scripts),
            BackendSettings::Chat { .. } => {}
        }
        if let RelevanceSettings::Scripted { tables } = &mut cfg.relevance {
            resolve(base_dir, tables);
        }
        if let PoolSettings::Manifest { path } = &mut cfg.pool {
            resolve(base_dir, path);
        }
        if let Some(mut file) = cfg.template_file.take() {
            resolve(base_dir, &mut file);
            let text = std::fs::read_to_string(&file)
                .map_err(|e| HarnessError::Config(format!("template {}: {e}", file.display())))?;
            cfg.template =
                toml::from_str(&text).map_err(|e| HarnessError::Config(format!("template {}: {e}", file.display())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let gating = self.gating();
        match gating.validate() {
            Ok(true) => log::warn!("tau {:?} lies outside [0, 1]", self.tau),
            Ok(false) => {}
            Err(e) => return Err(HarnessError::Config(e.to_string())),
        }
        if self.caps.max_steps == 0 || self.caps.max_step_tokens == 0 {
            return Err(HarnessError::Config("caps must be positive".into()));
        }
        if self.caps.max_insertions == Some(0) {
            return Err(HarnessError::Config(
                "max_insertions must be positive; use tau = \"never\" to disable insertion".into(),
            ));
        }
        if self.top_k < 2 {
            return Err(HarnessError::Config("top_k must be at least 2".into()));
        }
        if self.workers == 0 {
            return Err(HarnessError::Config("workers must be positive".into()));
        }
        self.filter.validate().map_err(HarnessError::Config)?;
        match (self.shots, &self.exemplar) {
            (Shots::OneShot, None) => {
                return Err(HarnessError::Config("one_shot requires an [exemplar] section".into()))
            }
            (Shots::ZeroShot, Some(_)) => log::warn!("exemplar is ignored in zero_shot mode"),
            _ => {}
        }
        if let Some(Exemplar {
            image_path: Some(p), ..
        }) = &self.exemplar
        {
            must_exist(p, "exemplar image")?;
        }
        if let BackendSettings::Scripted { scripts, .. } = &self.backend {
            must_exist(scripts, "backend scripts")?;
        }
        if let RelevanceSettings::Scripted { tables } = &self.relevance {
            must_exist(tables, "relevance tables")?;
        }
        if let PoolSettings::Manifest { path } = &self.pool {
            must_exist(path, "manifest")?;
        }
        Ok(())
    }

    pub fn gating(&self) -> GatingConfig {
        GatingConfig {
            policy: self.tau.policy(),
            max_insertions_per_trace: self.caps.max_insertions,
        }
    }

    pub fn with_policy(&self, policy: InsertionPolicy) -> Self {
        Self {
            tau: TauSetting::from_policy(policy),
            ..self.clone()
        }
    }

    pub fn estimator(&self) -> ImageTokenEstimator {
        ImageTokenEstimator {
            full_image_tokens: self.full_image_tokens,
        }
    }

    pub fn orchestrator(&self) -> OrchestratorConfig {
        let answer_marker = DEFAULT_STOP_SEQUENCES
            .get(1)
            .map(|s| s.to_string())
            .filter(|m| self.stop_sequences.contains(m));
        OrchestratorConfig {
            gating: self.gating(),
            max_steps: self.caps.max_steps,
            max_step_tokens: self.caps.max_step_tokens,
            top_k: self.top_k,
            stop_sequences: self.stop_sequences.clone(),
            answer_marker,
            seed: self.seed,
            labels: OrchestratorConfig::default().labels,
            template: self.template.clone(),
            exemplar: match self.shots {
                Shots::OneShot => self.exemplar.clone(),
                Shots::ZeroShot => None,
            },
        }
    }

    /// sha256 over the canonical JSON of the effective configuration.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).unwrap_or_default();
        hex::encode(Sha256::digest(serde_json::to_vec(&value).unwrap_or_default()))
    }
}
