//! Subcommand implementations shared by the binary and tests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::analysis::{
    check_against, load_tag_file, load_test_set, render_contamination_table, tag_metrics_precomputed,
    tag_with_gateway, ContaminationReport, NgramIndex, TagMetrics,
};
use crate::config::{BackendKind, ConfigError, PipelineConfig};
use crate::data_model::{load_dataset, make_split, make_split_with_dev, save_dataset, DatasetSplit, InstructionRecord};
use crate::evolution::{mix_rounds, EvolutionSettings, Evolver, RecordFailure};
use crate::failure::RuleSet;
use crate::gateway::{
    estimate_cost, Backend, ChatCompletionBackend, CostReport, Gateway, LedgerSnapshot, MockBackend, MockScript,
    OptimizationCostParams,
};
use crate::optimizer::{AuditLog, EvolvingMethod, Optimizer, OptimizerError, Termination};
use crate::templates::{PromptTemplate, TemplateName};

pub const METHOD_BEST_FILE: &str = "method_best.txt";
pub const AUDIT_FILE: &str = "audit.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.toml";
pub const EVOLVED_FILE: &str = "evolved.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const MIXED_FILE: &str = "mixed.jsonl";
pub const CONTAMINATION_FILE: &str = "contamination.json";
pub const TAGS_FILE: &str = "tags.json";
pub const ANALYSIS_REPORT_FILE: &str = "report.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("{failed} of {total} records failed to evolve (threshold {threshold})")]
    FailureThreshold { failed: usize, total: usize, threshold: f64 },
    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn config_err(message: impl ToString) -> PipelineError {
    PipelineError::Config(ConfigError::Invalid(message.to_string()))
}

fn missing(path: &Path) -> PipelineError {
    PipelineError::Config(ConfigError::MissingPath(path.display().to_string()))
}

/// Output directory for one command invocation: `<output_dir>/<run_id>`,
/// where the default id is `<command>-<UTC timestamp>`.
pub fn run_dir(config: &PipelineConfig, command: &str, run_id: Option<&str>) -> PathBuf {
    let id = match run_id {
        Some(id) => id.to_string(),
        None => format!("{command}-{}", chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ")),
    };
    config.paths.output_dir.join(id)
}

fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::Output {
        path: dir.display().to_string(),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|e| PipelineError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_text(path, &text)
}

fn write_dataset(path: &Path, records: &[InstructionRecord]) -> Result<(), PipelineError> {
    save_dataset(path, records).map_err(|e| PipelineError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn load_records(path: &Path) -> Result<Vec<InstructionRecord>, PipelineError> {
    if !path.exists() {
        return Err(missing(path));
    }
    load_dataset(path).map_err(|e| PipelineError::Config(ConfigError::Invalid(format!("{}: {e}", path.display()))))
}

/// Gateway over the configured backend with retry, rate limit and
/// concurrency settings applied.
pub fn build_gateway(config: &PipelineConfig) -> Result<Gateway, PipelineError> {
    let backend: Arc<dyn Backend> = match config.gateway.backend {
        BackendKind::Mock => {
            let mut script = MockScript::default();
            for path in &config.paths.mock_scripts {
                script.extend(MockScript::from_json_file(path).map_err(config_err)?);
            }
            Arc::new(MockBackend::new(script).map_err(config_err)?)
        }
        BackendKind::Http => {
            if config.gateway.api_key.is_none() {
                tracing::warn!("no API key configured; requests are sent without credentials");
            }
            Arc::new(ChatCompletionBackend::new(config.gateway.http_settings()).map_err(config_err)?)
        }
    };
    Ok(Gateway::new(backend)
        .with_retry(config.gateway.retry_policy())
        .with_rate_limit(config.gateway.requests_per_minute)
        .with_max_in_flight(config.gateway.max_in_flight))
}

fn template(config: &PipelineConfig, name: TemplateName) -> Result<PromptTemplate, PipelineError> {
    PromptTemplate::load(config.paths.prompt_dir.as_deref(), name).map_err(config_err)
}

pub fn evolution_settings(config: &PipelineConfig) -> Result<EvolutionSettings, PipelineError> {
    let e = &config.evolution;
    Ok(EvolutionSettings {
        marker: e.marker.clone(),
        evol_temperature: e.evol_temperature,
        responder_temperature: e.responder_temperature,
        max_tokens: e.max_tokens,
        response_template: template(config, TemplateName::ResponseGeneration)?,
    })
}

fn failure_rules(config: &PipelineConfig) -> Result<RuleSet, PipelineError> {
    match &config.paths.failure_rules {
        Some(path) => RuleSet::from_json_file(path).map_err(config_err),
        None => Ok(RuleSet::default()),
    }
}

fn read_method(path: &Path, marker: &str) -> Result<EvolvingMethod, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|_| missing(path))?;
    let method = EvolvingMethod::initial(text.strip_suffix('\n').unwrap_or(&text));
    method.validate(marker).map_err(config_err)?;
    Ok(method)
}

/// The configured initial method, or the shipped one.
pub fn initial_method(config: &PipelineConfig) -> Result<EvolvingMethod, PipelineError> {
    match &config.paths.initial_method {
        Some(path) => read_method(path, &config.evolution.marker),
        None => {
            let method = EvolvingMethod::initial(template(config, TemplateName::InitialMethod)?.body());
            method.validate(&config.evolution.marker).map_err(config_err)?;
            Ok(method)
        }
    }
}

/// Pool/dev split of the seed dataset per the config.
pub fn build_split(config: &PipelineConfig) -> Result<DatasetSplit, PipelineError> {
    let seed_path = config
        .paths
        .seed_dataset
        .as_deref()
        .ok_or_else(|| config_err("paths.seed_dataset is required"))?;
    let records = load_records(seed_path)?;
    let pool_size = config.evolution.pool_size;
    let split = match &config.paths.dev_dataset {
        Some(dev_path) => {
            let dev = load_records(dev_path)?;
            if dev.len() != config.optimizer.dev_size {
                tracing::warn!(file = dev.len(), configured = config.optimizer.dev_size, "dev set size differs from optimizer.dev_size; using the file");
            }
            let dev_ids: BTreeSet<&str> = dev.iter().map(|r| r.id.as_str()).collect();
            let available = records.iter().filter(|r| !dev_ids.contains(r.id.as_str())).count();
            make_split_with_dev(&records, dev.clone(), pool_size.unwrap_or(available), config.rng_seed)
        }
        None => {
            let dev_size = config.optimizer.dev_size;
            let pool = pool_size.unwrap_or(records.len().saturating_sub(dev_size));
            make_split(&records, pool, dev_size, config.rng_seed)
        }
    };
    split.map_err(config_err)
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeSummary {
    pub run_dir: PathBuf,
    pub termination: Termination,
    pub steps: u32,
    pub best_version: String,
    pub initial_lambda: f64,
    pub best_lambda: f64,
    pub ledger: LedgerSnapshot,
}

/// Runs the optimization loop and writes the best method, the audit log, the
/// ledger and a redacted config copy. An aborted run keeps its artifacts.
pub fn cmd_optimize(config: &PipelineConfig, run_id: Option<&str>) -> Result<OptimizeSummary, PipelineError> {
    config.validate()?;
    config.check_paths(true)?;
    let initial = initial_method(config)?;
    let split = build_split(config)?;
    let rules = failure_rules(config)?;
    let gateway = build_gateway(config)?;
    let evolver = Evolver::new(&gateway, evolution_settings(config)?);
    let optimizer = Optimizer::new(&evolver, config.optimizer)
        .map_err(config_err)?
        .with_rules(rules)
        .with_templates(
            template(config, TemplateName::TrajectoryAnalysis)?,
            template(config, TemplateName::MethodOptimization)?,
        );
    tracing::info!(pool = split.optimization_pool.len(), dev = split.dev_set.len(), "starting optimization");
    let result = optimizer.run(&initial, &split);

    let dir = run_dir(config, "optimize", run_id);
    create_dir(&dir)?;
    write_text(&dir.join(CONFIG_SNAPSHOT_FILE), &config.redacted_toml())?;
    let ledger = gateway.ledger().snapshot();
    write_json(&dir.join(LEDGER_FILE), &ledger)?;
    let outcome = match result {
        Ok(outcome) => outcome,
        Err(e @ (OptimizerError::Method(_) | OptimizerError::Config(_))) => return Err(config_err(e)),
        Err(e) => return Err(PipelineError::Aborted(e.to_string())),
    };
    let audit = AuditLog::from_run(&outcome, &config.optimizer, &split, &initial);
    write_json(&dir.join(AUDIT_FILE), &audit)?;
    write_text(&dir.join(METHOD_BEST_FILE), &format!("{}\n", outcome.best.text))?;
    tracing::info!(dir = %dir.display(), termination = ?outcome.termination, best = %outcome.best.version(), "optimization finished");
    if outcome.termination == Termination::Aborted {
        return Err(PipelineError::Aborted(outcome.error.unwrap_or_default()));
    }
    Ok(OptimizeSummary {
        run_dir: dir,
        termination: outcome.termination,
        steps: outcome.state.step,
        best_version: outcome.best.version(),
        initial_lambda: outcome.initial_lambda,
        best_lambda: outcome.state.incumbent_lambda,
        ledger,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvolveReport {
    pub input: PathBuf,
    pub method: PathBuf,
    pub rounds: u32,
    pub input_records: usize,
    pub evolved_records: usize,
    pub failed_records: usize,
    pub failure_fraction: f64,
    pub format_warnings: usize,
    pub failures: Vec<RecordFailure>,
    pub ledger: LedgerSnapshot,
    #[serde(skip)]
    pub run_dir: PathBuf,
}

/// Evolves a dataset with `method_path` for `rounds` rounds.
pub fn cmd_evolve(
    config: &PipelineConfig,
    method_path: &Path,
    input: Option<&Path>,
    rounds: u32,
    run_id: Option<&str>,
) -> Result<EvolveReport, PipelineError> {
    config.validate()?;
    config.check_paths(false)?;
    if rounds == 0 {
        return Err(config_err("rounds must be positive"));
    }
    let input = match input.or(config.paths.seed_dataset.as_deref()) {
        Some(p) => p.to_path_buf(),
        None => return Err(config_err("no input dataset given and paths.seed_dataset is unset")),
    };
    let method = read_method(method_path, &config.evolution.marker)?;
    let records = load_records(&input)?;
    let gateway = build_gateway(config)?;
    let evolver = Evolver::new(&gateway, evolution_settings(config)?);
    tracing::info!(records = records.len(), rounds, "evolving dataset");
    let result = evolver
        .evolve_dataset(&records, &method, rounds)
        .map_err(|e| PipelineError::Aborted(e.to_string()))?;

    let dir = run_dir(config, "evolve", run_id);
    create_dir(&dir)?;
    write_dataset(&dir.join(EVOLVED_FILE), &result.records)?;
    let failed = result.failures.len();
    let failure_fraction = if records.is_empty() { 0.0 } else { failed as f64 / records.len() as f64 };
    let report = EvolveReport {
        input,
        method: method_path.to_path_buf(),
        rounds,
        input_records: records.len(),
        evolved_records: result.records.len(),
        failed_records: failed,
        failure_fraction,
        format_warnings: result.format_warnings,
        failures: result.failures,
        ledger: gateway.ledger().snapshot(),
        run_dir: dir.clone(),
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    write_json(&dir.join(LEDGER_FILE), &report.ledger)?;
    if failure_fraction > config.evolution.max_failure_fraction {
        return Err(PipelineError::FailureThreshold {
            failed,
            total: records.len(),
            threshold: config.evolution.max_failure_fraction,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct MixReport {
    pub inputs: Vec<PathBuf>,
    pub rounds: BTreeSet<u32>,
    pub input_records: usize,
    pub mixed_records: usize,
    pub records_per_round: BTreeMap<u32, usize>,
    #[serde(skip)]
    pub run_dir: PathBuf,
}

/// Concatenates the records of the selected rounds from one or more datasets.
pub fn cmd_mix(
    config: &PipelineConfig,
    inputs: &[PathBuf],
    rounds: &BTreeSet<u32>,
    run_id: Option<&str>,
) -> Result<MixReport, PipelineError> {
    if inputs.is_empty() || rounds.is_empty() {
        return Err(config_err("mix needs at least one input and one round"));
    }
    let mut all = Vec::new();
    for path in inputs {
        all.extend(load_records(path)?);
    }
    let mixed = mix_rounds(&all, rounds);
    let mut records_per_round = BTreeMap::new();
    for r in &mixed {
        *records_per_round.entry(r.round).or_insert(0) += 1;
    }
    let dir = run_dir(config, "mix", run_id);
    create_dir(&dir)?;
    write_dataset(&dir.join(MIXED_FILE), &mixed)?;
    let report = MixReport {
        inputs: inputs.to_vec(),
        rounds: rounds.clone(),
        input_records: all.len(),
        mixed_records: mixed.len(),
        records_per_round,
        run_dir: dir.clone(),
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub contamination: Vec<ContaminationReport>,
    pub tags: TagMetrics,
    pub ledger: LedgerSnapshot,
    #[serde(skip)]
    pub run_dir: PathBuf,
}

/// Contamination at every configured n-gram size plus tag metrics, either
/// from a sidecar tag file or from tagger calls.
pub fn cmd_analyze(
    config: &PipelineConfig,
    dataset: &Path,
    test_set: &Path,
    tags_file: Option<&Path>,
    run_id: Option<&str>,
) -> Result<AnalyzeReport, PipelineError> {
    config.validate()?;
    for path in [dataset, test_set].into_iter().chain(tags_file) {
        if !path.exists() {
            return Err(missing(path));
        }
    }
    let records = load_records(dataset)?;
    let test_items = load_test_set(test_set).map_err(config_err)?;
    if test_items.is_empty() {
        return Err(config_err(format!("test set {} is empty", test_set.display())));
    }
    let tokenizer = config.analysis.tokenizer();
    let contamination: Vec<ContaminationReport> = config
        .analysis
        .ngram_sizes
        .iter()
        .map(|&n| check_against(&NgramIndex::build(n, tokenizer, &test_items), &records))
        .collect();

    let (tags, ledger) = match tags_file {
        Some(path) => {
            let precomputed = load_tag_file(path).map_err(config_err)?;
            (
                tag_metrics_precomputed(&records, &precomputed, config.analysis.diversity_mode),
                LedgerSnapshot::default(),
            )
        }
        None => {
            config.check_paths(false)?;
            let gateway = build_gateway(config)?;
            let tagger = template(config, TemplateName::Tagging)?;
            let metrics = tag_with_gateway(&records, &gateway, &tagger, config.analysis.diversity_mode);
            (metrics, gateway.ledger().snapshot())
        }
    };

    let dir = run_dir(config, "analyze", run_id);
    create_dir(&dir)?;
    write_json(&dir.join(CONTAMINATION_FILE), &contamination)?;
    write_json(&dir.join(TAGS_FILE), &tags)?;
    write_json(&dir.join(LEDGER_FILE), &ledger)?;
    let mut text = render_contamination_table(&contamination);
    text.push_str(&format!(
        "\nrecords {}  complexity {:.4}  diversity {:.4}  untagged {}\n",
        records.len(),
        tags.complexity,
        tags.diversity,
        tags.warnings.len()
    ));
    write_text(&dir.join(ANALYSIS_REPORT_FILE), &text)?;
    Ok(AnalyzeReport {
        contamination,
        tags,
        ledger,
        run_dir: dir,
    })
}

/// Call-count estimate using the configured optimizer settings.
pub fn cmd_estimate_cost(config: &PipelineConfig, datasize: u64, rounds: u64) -> Result<CostReport, PipelineError> {
    let o = &config.optimizer;
    let params = OptimizationCostParams {
        steps: u64::from(o.max_steps),
        batch_size: o.batch_size as u64,
        trajectory_rounds: o.trajectory_rounds as u64,
        candidates: o.candidates as u64,
        dev_size: o.dev_size as u64,
    };
    estimate_cost(datasize, rounds, &params).map_err(config_err)
}

/// Plain-text rendering of a cost report.
pub fn render_cost(report: &CostReport) -> String {
    format!(
        "full evolution calls   {:>12}\noptimization calls     {:>12}\ntotal                  {:>12}\n",
        report.full_evolution_calls, report.optimization_calls, report.total_calls
    )
}
