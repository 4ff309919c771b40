//! The evolving-method optimization loop.
//!
//! Each step draws a mini-batch, evolves it under the incumbent method,
//! asks the optimizer LLM for `m` independent analyses of the resulting
//! trajectories, turns each analysis into a revised method, scores every
//! revision by its failure rate on the dev set and keeps the best one if it
//! strictly beats the incumbent.
//!
//! Optimizer-role calls within a step are issued in candidate order so that
//! scripted backends replay identically; dev-set evaluation fans out through
//! the gateway.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{next_minibatch, DatasetError, DatasetSplit, InstructionRecord};
use crate::evolution::{EvolutionError, EvolutionTrajectory, Evolver};
use crate::failure::{failure_rate, FailureError, FailureVerdict, RuleSet};
use crate::gateway::{GatewayError, GenerationRequest, RoleTag};
use crate::templates::{PromptTemplate, TemplateError, TemplateName};

pub const PHASE_INITIAL_EVAL: &str = "initial_evaluation";
pub const PHASE_TRAJECTORY: &str = "trajectory";
pub const PHASE_ANALYSIS: &str = "analysis";
pub const PHASE_OPTIMIZATION: &str = "optimization";
pub const PHASE_DEV_EVAL: &str = "dev_evaluation";

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Failure(#[from] FailureError),
    #[error("optimizer call failed: {0}")]
    Gateway(#[from] GatewayError),
    #[error("candidate rejected: {0}")]
    CandidateFormat(String),
    #[error("step {step} failed: {reason}")]
    Step { step: u32, reason: String },
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("invalid evolving method: {0}")]
    Method(String),
}

/// A versioned meta-prompt that tells the evol LLM how to rewrite an
/// instruction. The text must contain the `{instruction}` placeholder and the
/// extraction marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolvingMethod {
    pub text: String,
    pub step: u32,
    pub parent_step: Option<u32>,
    pub feedback_digest: Option<String>,
    pub candidate_index: Option<u32>,
}

impl EvolvingMethod {
    pub fn initial(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            step: 0,
            parent_step: None,
            feedback_digest: None,
            candidate_index: None,
        }
    }

    pub fn version(&self) -> String {
        match self.candidate_index {
            Some(i) => format!("step{}-cand{}", self.step, i),
            None => format!("step{}", self.step),
        }
    }

    pub fn validate(&self, marker: &str) -> Result<(), OptimizerError> {
        if self.text.trim().is_empty() {
            return Err(OptimizerError::Method("text is empty".into()));
        }
        if !self.text.contains(marker) {
            return Err(OptimizerError::Method(format!("text lacks the marker {marker:?}")));
        }
        if !crate::templates::placeholders_in(&self.text).iter().any(|p| p == "instruction") {
            return Err(OptimizerError::Method("text lacks the {instruction} placeholder".into()));
        }
        let root = self.step == 0;
        if root != (self.parent_step.is_none() && self.feedback_digest.is_none()) {
            return Err(OptimizerError::Method("only step 0 may lack lineage".into()));
        }
        Ok(())
    }

    pub fn render(&self, instruction: &str) -> Result<String, TemplateError> {
        PromptTemplate::new("evolving_method", self.text.as_str(), ["instruction"])?
            .render_with(&[("instruction", instruction)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub batch_size: usize,
    pub dev_size: usize,
    /// Analyses and revisions sampled per step.
    pub candidates: usize,
    pub max_steps: u32,
    pub patience: u32,
    /// Evolution rounds per trajectory.
    pub trajectory_rounds: usize,
    pub optimizer_temperature: f64,
    pub optimizer_top_p: f64,
    pub max_tokens: u32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            dev_size: 50,
            candidates: 5,
            max_steps: 10,
            patience: 1,
            trajectory_rounds: 1,
            optimizer_temperature: 0.6,
            optimizer_top_p: 0.95,
            max_tokens: 4096,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let checks = [
            (self.batch_size > 0, "batch_size must be positive"),
            (self.dev_size > 0, "dev_size must be positive"),
            (self.candidates > 0, "candidates must be positive"),
            (self.max_steps > 0, "max_steps must be positive"),
            (self.patience > 0, "patience must be positive"),
            (self.trajectory_rounds > 0, "trajectory_rounds must be positive"),
            (self.max_tokens > 0, "max_tokens must be positive"),
            ((0.0..=2.0).contains(&self.optimizer_temperature), "optimizer_temperature outside [0, 2]"),
            (self.optimizer_top_p > 0.0 && self.optimizer_top_p <= 1.0, "optimizer_top_p outside (0, 1]"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(OptimizerError::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvaluation {
    pub candidate: EvolvingMethod,
    pub dev_responses: Vec<String>,
    pub verdicts: Vec<FailureVerdict>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: u32,
    pub version: Option<String>,
    pub lambda: Option<f64>,
    pub error: Option<String>,
}

/// One completed (or failed) optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub batch_ids: Vec<String>,
    pub feedbacks: Vec<String>,
    pub candidates: Vec<CandidateRecord>,
    /// Lowest-λ candidate (ties to the lowest index), whether or not adopted.
    pub best_index: Option<u32>,
    pub accepted: bool,
    pub incumbent_lambda: f64,
    pub error: Option<String>,
}

impl StepRecord {
    pub fn candidate_lambdas(&self) -> Vec<Option<f64>> {
        self.candidates.iter().map(|c| c.lambda).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub incumbent: EvolvingMethod,
    pub incumbent_lambda: f64,
    /// Number of steps attempted so far.
    pub step: u32,
    pub history: Vec<StepRecord>,
    pub no_improvement_streak: u32,
}

impl OptimizerState {
    pub fn new(incumbent: EvolvingMethod, incumbent_lambda: f64) -> Self {
        Self {
            incumbent,
            incumbent_lambda,
            step: 0,
            history: Vec::new(),
            no_improvement_streak: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The failure rate stopped decreasing for `patience` steps.
    Plateau,
    MaxSteps,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub best: EvolvingMethod,
    pub state: OptimizerState,
    pub initial_lambda: f64,
    pub termination: Termination,
    pub error: Option<String>,
}

/// Serialized run audit: enough to replay which method won at every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub config: OptimizerConfig,
    pub rng_seed: u64,
    pub dev_ids: Vec<String>,
    pub initial_version: String,
    pub initial_lambda: f64,
    pub steps: Vec<StepRecord>,
    pub best_version: String,
    pub best_lambda: f64,
    pub termination: Termination,
    pub error: Option<String>,
}

impl AuditLog {
    pub fn from_run(outcome: &RunOutcome, config: &OptimizerConfig, split: &DatasetSplit, initial: &EvolvingMethod) -> Self {
        Self {
            config: *config,
            rng_seed: split.rng_seed,
            dev_ids: split.dev_set.iter().map(|r| r.id.clone()).collect(),
            initial_version: initial.version(),
            initial_lambda: outcome.initial_lambda,
            steps: outcome.state.history.clone(),
            best_version: outcome.best.version(),
            best_lambda: outcome.state.incumbent_lambda,
            termination: outcome.termination,
            error: outcome.error.clone(),
        }
    }
}

/// Serializes trajectories for the analysis prompt.
pub fn format_trajectories(trajectories: &[EvolutionTrajectory]) -> String {
    let mut out = String::new();
    for (i, t) in trajectories.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("Case {}:\n", i + 1));
        for (stage, text) in t.stages().enumerate() {
            out.push_str(&format!("Stage {stage}: {text}\n"));
        }
        if let Some(f) = &t.failure {
            out.push_str(&format!("Stage {}: <evolution failed: {}>\n", f.round, f.message));
        }
    }
    out
}

/// Pulls the method text out of an optimizer reply: the body of the
/// "```Optimized Method" fence when present, else the whole reply.
pub fn parse_optimized_method(output: &str) -> String {
    const FENCE: &str = "```Optimized Method";
    if let Some(start) = output.rfind(FENCE) {
        let body = &output[start + FENCE.len()..];
        let body = body.strip_prefix('\n').or_else(|| body.strip_prefix("\r\n")).unwrap_or(body);
        let body = match body.find("```") {
            Some(end) => &body[..end],
            None => body,
        };
        return body.trim().to_string();
    }
    output.trim().to_string()
}

/// Index (0-based) of the smallest value; ties go to the earliest.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if v >= b => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

pub struct Optimizer<'a> {
    evolver: &'a Evolver<'a>,
    config: OptimizerConfig,
    rules: RuleSet,
    analysis_template: PromptTemplate,
    optimization_template: PromptTemplate,
}

impl<'a> Optimizer<'a> {
    pub fn new(evolver: &'a Evolver<'a>, config: OptimizerConfig) -> Result<Self, OptimizerError> {
        config.validate()?;
        Ok(Self {
            evolver,
            config,
            rules: RuleSet::default(),
            analysis_template: PromptTemplate::shipped(TemplateName::TrajectoryAnalysis),
            optimization_template: PromptTemplate::shipped(TemplateName::MethodOptimization),
        })
    }

    pub fn with_rules(mut self, rules: RuleSet) -> Self {
        self.rules = rules;
        self
    }

    pub fn with_templates(mut self, analysis: PromptTemplate, optimization: PromptTemplate) -> Self {
        self.analysis_template = analysis;
        self.optimization_template = optimization;
        self
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    fn optimizer_request(&self, prompt: String) -> GenerationRequest {
        GenerationRequest::new(RoleTag::Optimizer, prompt)
            .sampling(self.config.optimizer_temperature, self.config.optimizer_top_p)
            .max_tokens(self.config.max_tokens)
    }

    /// `samples` independent analyses of the batch trajectories. Failed calls
    /// are dropped; at least one must survive.
    pub fn analyze_trajectories(
        &self,
        trajectories: &[EvolutionTrajectory],
        samples: usize,
    ) -> Result<Vec<String>, OptimizerError> {
        if trajectories.is_empty() || samples == 0 {
            return Err(OptimizerError::Step {
                step: 0,
                reason: "analysis needs trajectories and at least one sample".into(),
            });
        }
        let prompt = self
            .analysis_template
            .render_with(&[("trajectory", format_trajectories(trajectories).as_str())])?;
        let request = self.optimizer_request(prompt);
        let feedbacks: Vec<String> = (0..samples)
            .filter_map(|i| match self.evolver.gateway().generate(&request, PHASE_ANALYSIS) {
                Ok(text) if !text.trim().is_empty() => Some(text),
                Ok(_) => {
                    tracing::warn!(sample = i + 1, "empty analysis dropped");
                    None
                }
                Err(e) => {
                    tracing::warn!(sample = i + 1, error = %e, "analysis dropped");
                    None
                }
            })
            .collect();
        if feedbacks.is_empty() {
            return Err(OptimizerError::Step {
                step: 0,
                reason: "no analysis sample survived".into(),
            });
        }
        Ok(feedbacks)
    }

    /// Asks the optimizer LLM to revise `current` using `feedback`.
    pub fn optimize_method(
        &self,
        current: &EvolvingMethod,
        feedback: &str,
        candidate_index: u32,
    ) -> Result<EvolvingMethod, OptimizerError> {
        if feedback.trim().is_empty() {
            return Err(OptimizerError::CandidateFormat("feedback is empty".into()));
        }
        let marker = self.evolver.settings().marker.as_str();
        let prompt = self.optimization_template.render_with(&[
            ("method", current.text.as_str()),
            ("feedback", feedback),
            ("marker", marker),
        ])?;
        let output = self
            .evolver
            .gateway()
            .generate(&self.optimizer_request(prompt), PHASE_OPTIMIZATION)?;
        let candidate = EvolvingMethod {
            text: parse_optimized_method(&output),
            step: current.step + 1,
            parent_step: Some(current.step),
            feedback_digest: Some(feedback.to_string()),
            candidate_index: Some(candidate_index),
        };
        candidate
            .validate(marker)
            .map_err(|e| OptimizerError::CandidateFormat(e.to_string()))?;
        Ok(candidate)
    }

    /// Evolves every dev record under `candidate`, answers it, and scores the
    /// answers. A record whose calls fail counts as a failure.
    pub fn evaluate_candidate(
        &self,
        candidate: &EvolvingMethod,
        dev_set: &[InstructionRecord],
        phase: &str,
    ) -> Result<CandidateEvaluation, OptimizerError> {
        if dev_set.is_empty() {
            return Err(FailureError::EmptyDevSet.into());
        }
        let results = self.evolver.gateway().map_bounded(dev_set, |record| {
            let evolved = self.evolver.evolve_once(record.final_instruction(), candidate, phase)?;
            self.evolver.generate_response(&evolved.instruction, phase)
        });
        let (dev_responses, verdicts): (Vec<String>, Vec<FailureVerdict>) = results
            .into_iter()
            .map(|r| match r {
                Ok(response) => {
                    let verdict = self.rules.classify(&response);
                    (response, verdict)
                }
                Err(e) => (String::new(), FailureVerdict::gateway_failure(&e.to_string())),
            })
            .unzip();
        let lambda = failure_rate(&verdicts, dev_set.len())?;
        Ok(CandidateEvaluation {
            candidate: candidate.clone(),
            dev_responses,
            verdicts,
            lambda,
        })
    }

    /// Runs one optimization step, updating `state` in place. On error the
    /// incumbent is untouched and a history row carrying the error is added.
    pub fn step(&self, state: &mut OptimizerState, split: &DatasetSplit) -> Result<(), OptimizerError> {
        let step = state.step + 1;
        let mut record = StepRecord {
            step,
            batch_ids: Vec::new(),
            feedbacks: Vec::new(),
            candidates: Vec::new(),
            best_index: None,
            accepted: false,
            incumbent_lambda: state.incumbent_lambda,
            error: None,
        };
        let result = self.step_inner(state, split, &mut record);
        state.step = step;
        if let Err(e) = &result {
            record.error = Some(e.to_string());
        }
        record.incumbent_lambda = state.incumbent_lambda;
        state.history.push(record);
        result.map_err(|e| match e {
            OptimizerError::Step { reason, .. } => OptimizerError::Step { step, reason },
            other => OptimizerError::Step {
                step,
                reason: other.to_string(),
            },
        })
    }

    fn step_inner(&self, state: &mut OptimizerState, split: &DatasetSplit, record: &mut StepRecord) -> Result<(), OptimizerError> {
        let step = record.step;
        let batch = next_minibatch(split, u64::from(step), self.config.batch_size)?;
        record.batch_ids = batch.iter().map(|r| r.id.clone()).collect();

        let incumbent = &state.incumbent;
        let rounds = self.config.trajectory_rounds;
        let trajectories = self
            .evolver
            .gateway()
            .map_bounded(&batch, |r| self.evolver.build_trajectory(r, incumbent, rounds, PHASE_TRAJECTORY))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;

        let feedbacks = self.analyze_trajectories(&trajectories, self.config.candidates)?;
        record.feedbacks = feedbacks.clone();

        let mut evaluations: Vec<(u32, CandidateEvaluation)> = Vec::new();
        for (i, feedback) in feedbacks.iter().enumerate() {
            let index = i as u32 + 1;
            let outcome = self
                .optimize_method(incumbent, feedback, index)
                .and_then(|candidate| self.evaluate_candidate(&candidate, &split.dev_set, PHASE_DEV_EVAL));
            match outcome {
                Ok(eval) => {
                    record.candidates.push(CandidateRecord {
                        index,
                        version: Some(eval.candidate.version()),
                        lambda: Some(eval.lambda),
                        error: None,
                    });
                    evaluations.push((index, eval));
                }
                Err(e) => {
                    tracing::warn!(step, candidate = index, error = %e, "candidate discarded");
                    record.candidates.push(CandidateRecord {
                        index,
                        version: None,
                        lambda: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        if evaluations.is_empty() {
            return Err(OptimizerError::Step {
                step,
                reason: "no candidate survived".into(),
            });
        }

        let lambdas: Vec<f64> = evaluations.iter().map(|(_, e)| e.lambda).collect();
        let best = argmin_first(&lambdas).expect("non-empty");
        let (best_index, best_eval) = &evaluations[best];
        record.best_index = Some(*best_index);
        if best_eval.lambda < state.incumbent_lambda {
            tracing::info!(step, candidate = best_index, lambda = best_eval.lambda, "new incumbent");
            state.incumbent = best_eval.candidate.clone();
            state.incumbent_lambda = best_eval.lambda;
            state.no_improvement_streak = 0;
            record.accepted = true;
        } else {
            tracing::info!(step, best = best_eval.lambda, incumbent = state.incumbent_lambda, "no improvement");
            state.no_improvement_streak += 1;
        }
        Ok(())
    }

    /// Measures the initial method, then steps until the failure rate has not
    /// decreased for `patience` steps or `max_steps` steps have run.
    pub fn run(&self, initial: &EvolvingMethod, split: &DatasetSplit) -> Result<RunOutcome, OptimizerError> {
        initial.validate(&self.evolver.settings().marker)?;
        let initial_eval = self.evaluate_candidate(initial, &split.dev_set, PHASE_INITIAL_EVAL)?;
        tracing::info!(lambda = initial_eval.lambda, "initial method evaluated");
        let mut state = OptimizerState::new(initial.clone(), initial_eval.lambda);
        let mut error = None;
        let termination = loop {
            if state.no_improvement_streak >= self.config.patience {
                break Termination::Plateau;
            }
            if state.step >= self.config.max_steps {
                break Termination::MaxSteps;
            }
            if let Err(e) = self.step(&mut state, split) {
                tracing::error!(error = %e, "optimization aborted");
                error = Some(e.to_string());
                break Termination::Aborted;
            }
        };
        Ok(RunOutcome {
            best: state.incumbent.clone(),
            initial_lambda: initial_eval.lambda,
            state,
            termination,
            error,
        })
    }
}
