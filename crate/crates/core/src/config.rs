//! Declarative pipeline configuration (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{DiversityMode, Tokenizer, STANDARD_NGRAM_SIZES};
use crate::gateway::{HttpSettings, RetryPolicy, RoleTag};
use crate::optimizer::OptimizerConfig;
use crate::templates::DEFAULT_MARKER;

pub const ENV_API_KEY: &str = "EVOLVER_API_KEY";
pub const ENV_ENDPOINT: &str = "EVOLVER_ENDPOINT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("missing input: {0}")]
    MissingPath(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub seed_dataset: Option<PathBuf>,
    /// Fixed development set; sampled from the seed dataset when absent.
    pub dev_dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Directory with replacement prompt files named after the templates.
    pub prompt_dir: Option<PathBuf>,
    /// Initial evolving method; the shipped one when absent.
    pub initial_method: Option<PathBuf>,
    pub mock_scripts: Vec<PathBuf>,
    pub failure_rules: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: BackendKind,
    pub endpoint: String,
    /// Prefer the environment variable over writing keys into files.
    pub api_key: Option<String>,
    pub auth_header: String,
    pub models: BTreeMap<RoleTag, String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub requests_per_minute: Option<u32>,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        let http = HttpSettings::default();
        let retry = RetryPolicy::default();
        Self {
            backend: BackendKind::Mock,
            endpoint: http.endpoint,
            api_key: None,
            auth_header: http.auth_header,
            models: BTreeMap::new(),
            timeout_secs: http.timeout_secs,
            max_retries: retry.max_retries,
            base_delay_ms: retry.base_delay_ms,
            max_delay_ms: retry.max_delay_ms,
            requests_per_minute: None,
            max_in_flight: 8,
        }
    }
}

impl GatewayConfig {
    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay_ms: self.base_delay_ms,
            max_delay_ms: self.max_delay_ms,
        }
    }

    pub fn http_settings(&self) -> HttpSettings {
        HttpSettings {
            endpoint: self.endpoint.clone(),
            api_key: self.api_key.clone(),
            auth_header: self.auth_header.clone(),
            models: self.models.clone(),
            timeout_secs: self.timeout_secs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub marker: String,
    pub evol_temperature: f64,
    pub responder_temperature: f64,
    pub max_tokens: u32,
    /// Optimization pool size; every non-dev record when absent.
    pub pool_size: Option<usize>,
    /// `evolve` exits nonzero when more seeds than this fraction fail.
    pub max_failure_fraction: f64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            marker: DEFAULT_MARKER.into(),
            evol_temperature: 0.0,
            responder_temperature: 0.0,
            max_tokens: 2048,
            pool_size: None,
            max_failure_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub ngram_sizes: Vec<usize>,
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub diversity_mode: DiversityMode,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let t = Tokenizer::default();
        Self {
            ngram_sizes: STANDARD_NGRAM_SIZES.to_vec(),
            lowercase: t.lowercase,
            strip_punctuation: t.strip_punctuation,
            diversity_mode: DiversityMode::default(),
        }
    }
}

impl AnalysisConfig {
    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            lowercase: self.lowercase,
            strip_punctuation: self.strip_punctuation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rng_seed: u64,
    pub paths: PathsConfig,
    pub optimizer: OptimizerConfig,
    pub evolution: EvolutionConfig,
    pub gateway: GatewayConfig,
    pub analysis: AnalysisConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            paths: PathsConfig {
                output_dir: PathBuf::from("runs"),
                ..PathsConfig::default()
            },
            optimizer: OptimizerConfig::default(),
            evolution: EvolutionConfig::default(),
            gateway: GatewayConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Reads a config file, resolves relative paths against its directory,
    /// applies environment overrides and validates it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut config = Self::from_toml_str(&text, base)?;
        config.apply_env(|k| std::env::var(k).ok());
        config.validate()?;
        Ok(config)
    }

    /// Parses without environment overrides or validation.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.resolve_paths(base_dir);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for opt in [
            &mut p.seed_dataset,
            &mut p.dev_dataset,
            &mut p.prompt_dir,
            &mut p.initial_method,
            &mut p.failure_rules,
        ] {
            if let Some(path) = opt.as_mut() {
                resolve(base, path);
            }
        }
        resolve(base, &mut p.output_dir);
        for script in &mut p.mock_scripts {
            resolve(base, script);
        }
    }

    /// Secrets and the endpoint may come from the environment; these win
    /// over the file.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(key) = lookup(ENV_API_KEY).filter(|k| !k.is_empty()) {
            self.gateway.api_key = Some(key);
        }
        if let Some(endpoint) = lookup(ENV_ENDPOINT).filter(|e| !e.is_empty()) {
            self.gateway.endpoint = endpoint;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.optimizer
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let invalid = |m: &str| Err(ConfigError::Invalid(m.into()));
        let e = &self.evolution;
        if e.marker.trim().is_empty() {
            return invalid("evolution.marker must not be empty");
        }
        if !(0.0..=2.0).contains(&e.evol_temperature) || !(0.0..=2.0).contains(&e.responder_temperature) {
            return invalid("evolution temperatures must lie in [0, 2]");
        }
        if e.max_tokens == 0 {
            return invalid("evolution.max_tokens must be positive");
        }
        if e.pool_size == Some(0) {
            return invalid("evolution.pool_size must be positive");
        }
        if !(0.0..=1.0).contains(&e.max_failure_fraction) {
            return invalid("evolution.max_failure_fraction must lie in [0, 1]");
        }
        let g = &self.gateway;
        if g.max_in_flight == 0 {
            return invalid("gateway.max_in_flight must be positive");
        }
        if g.requests_per_minute == Some(0) {
            return invalid("gateway.requests_per_minute must be positive");
        }
        if g.base_delay_ms > g.max_delay_ms {
            return invalid("gateway.base_delay_ms exceeds gateway.max_delay_ms");
        }
        match g.backend {
            BackendKind::Mock if self.paths.mock_scripts.is_empty() => {
                return invalid("mock backend needs at least one paths.mock_scripts entry");
            }
            BackendKind::Http => {
                if g.endpoint.trim().is_empty() {
                    return invalid("gateway.endpoint must not be empty");
                }
                if let Some(role) = RoleTag::ALL.iter().find(|r| !g.models.contains_key(r)) {
                    return Err(ConfigError::Invalid(format!("gateway.models has no entry for {role}")));
                }
            }
            _ => {}
        }
        let a = &self.analysis;
        if a.ngram_sizes.is_empty() || a.ngram_sizes.contains(&0) {
            return invalid("analysis.ngram_sizes must be non-empty and positive");
        }
        Ok(())
    }

    /// Checks that every configured path a command reads exists.
    pub fn check_paths(&self, need_seed: bool) -> Result<(), ConfigError> {
        let p = &self.paths;
        if need_seed && p.seed_dataset.is_none() {
            return Err(ConfigError::Invalid("paths.seed_dataset is required".into()));
        }
        let mut inputs: Vec<&PathBuf> = p.mock_scripts.iter().collect();
        if need_seed {
            inputs.extend(p.seed_dataset.iter().chain(&p.dev_dataset).chain(&p.initial_method));
        }
        inputs.extend(p.prompt_dir.iter().chain(&p.failure_rules));
        if self.gateway.backend == BackendKind::Http {
            inputs.retain(|path| !p.mock_scripts.contains(path));
        }
        match inputs.into_iter().find(|path| !path.exists()) {
            Some(missing) => Err(ConfigError::MissingPath(missing.display().to_string())),
            None => Ok(()),
        }
    }

    /// Serialized form with the API key masked, for run directories.
    pub fn redacted_toml(&self) -> String {
        let mut copy = self.clone();
        if copy.gateway.api_key.is_some() {
            copy.gateway.api_key = Some("***".into());
        }
        toml::to_string_pretty(&copy).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
rng_seed = 11

[paths]
seed_dataset = "data/seed.jsonl"
output_dir = "/abs/runs"
mock_scripts = ["mock.json"]

[optimizer]
candidates = 3
dev_size = 20

[gateway]
max_retries = 2
"#;

    #[test]
    fn defaults_fill_missing_fields() {
        let c = PipelineConfig::from_toml_str(SAMPLE, Path::new("/cfg")).unwrap();
        assert_eq!(c.rng_seed, 11);
        assert_eq!(c.optimizer.candidates, 3);
        assert_eq!(c.optimizer.batch_size, 10);
        assert_eq!(c.optimizer.optimizer_temperature, 0.6);
        assert_eq!(c.evolution.evol_temperature, 0.0);
        assert_eq!(c.gateway.retry_policy().max_retries, 2);
        assert_eq!(c.analysis.ngram_sizes, [13, 8]);
        assert_eq!(c.paths.seed_dataset.as_deref(), Some(Path::new("/cfg/data/seed.jsonl")));
        assert_eq!(c.paths.output_dir, Path::new("/abs/runs"));
        assert_eq!(c.paths.mock_scripts, [PathBuf::from("/cfg/mock.json")]);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = PipelineConfig::from_toml_str("[optimizer]\nbatch = 3\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn validation_failures() {
        let base = || PipelineConfig::from_toml_str(SAMPLE, Path::new("/cfg")).unwrap();
        let mut c = base();
        c.optimizer.patience = 0;
        assert!(c.validate().is_err());
        let mut c = base();
        c.paths.mock_scripts.clear();
        assert!(c.validate().is_err());
        let mut c = base();
        c.gateway.backend = BackendKind::Http;
        assert!(c.validate().unwrap_err().to_string().contains("models"));
        for role in RoleTag::ALL {
            c.gateway.models.insert(role, "m".into());
        }
        c.validate().unwrap();
        let mut c = base();
        c.evolution.max_failure_fraction = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn env_overrides_file() {
        let mut c = PipelineConfig::from_toml_str(
            "[gateway]\napi_key = \"from-file\"\nendpoint = \"http://file\"\n",
            Path::new("."),
        )
        .unwrap();
        c.apply_env(|k| match k {
            ENV_API_KEY => Some("from-env".into()),
            _ => None,
        });
        assert_eq!(c.gateway.api_key.as_deref(), Some("from-env"));
        assert_eq!(c.gateway.endpoint, "http://file");
        assert!(c.redacted_toml().contains("***"));
        assert!(!c.redacted_toml().contains("from-env"));
    }

    #[test]
    fn missing_inputs_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("mock.json"), "[]").unwrap();
        let c = PipelineConfig::from_toml_str(SAMPLE, dir.path()).unwrap();
        let err = c.check_paths(true).unwrap_err();
        assert!(matches!(err, ConfigError::MissingPath(p) if p.ends_with("seed.jsonl")));
        c.check_paths(false).unwrap();
    }
}
