use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CostError {
    #[error("{0} must be positive")]
    NotPositive(&'static str),
}

/// Optimizer settings that drive the optimization overhead estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizationCostParams {
    pub steps: u64,
    pub batch_size: u64,
    pub trajectory_rounds: u64,
    pub candidates: u64,
    pub dev_size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// One evolve call plus one response call per record and round.
    pub full_evolution_calls: u64,
    /// Estimate of the calls spent optimizing the evolving method.
    pub optimization_calls: u64,
    pub total_calls: u64,
}

/// Counts API calls for a pipeline run.
///
/// Full evolution: `datasize * rounds * 2`. Optimization overhead per step:
/// `batch * l` trajectory evolutions, `m` analyses, `m` method rewrites and
/// `m * |D| * 2` dev-set evaluation calls. The overhead term is an estimate;
/// it excludes retries and the one-off evaluation of the initial method.
pub fn estimate_cost(
    datasize: u64,
    rounds_per_record: u64,
    optimizer: &OptimizationCostParams,
) -> Result<CostReport, CostError> {
    let positive = [
        (rounds_per_record, "rounds_per_record"),
        (optimizer.steps, "steps"),
        (optimizer.batch_size, "batch_size"),
        (optimizer.trajectory_rounds, "trajectory_rounds"),
        (optimizer.candidates, "candidates"),
        (optimizer.dev_size, "dev_size"),
    ];
    if let Some((_, name)) = positive.iter().find(|(v, _)| *v == 0) {
        return Err(CostError::NotPositive(name));
    }
    let full_evolution_calls = datasize * rounds_per_record * 2;
    let per_step = optimizer.batch_size * optimizer.trajectory_rounds
        + optimizer.candidates
        + optimizer.candidates
        + optimizer.candidates * optimizer.dev_size * 2;
    let optimization_calls = optimizer.steps * per_step;
    Ok(CostReport {
        full_evolution_calls,
        optimization_calls,
        total_calls: full_evolution_calls + optimization_calls,
    })
}
