//! End-to-end workflows shared by the CLI and the C bindings: calibrate a
//! policy for a budget, run it on the test split, run the oracle, and sweep
//! budgets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{
    default_prior, solve_allocation, AllocationError, AllocationProblem, DEFAULT_BETA,
};
use crate::calibration::{build_cdfs, policy_from_cdfs, CalibrationError, Correction, ScoreCdf};
use crate::domain::{
    AllocationResult, BatchResult, BatchSummary, BudgetSpec, Dataset, DomainError, ExitPolicy,
    Split, SplitData,
};
use crate::inference::{classify_batch, measure_budget, BudgetReport, InferenceError};
use crate::io::{compute_risks, IoError, SweepRow, SweepSource};
use crate::oracle::{
    oracle_exact, oracle_greedy, OracleError, OracleInstance, OracleMode, OracleSolution,
};
use crate::scoring::{ScoreSpec, ScoreTable};
use crate::synth::SynthError;

/// Process exit codes, also used as FFI status codes.
pub mod exit_code {
    pub const OK: i32 = 0;
    pub const INVALID: i32 = 2;
    pub const IO: i32 = 3;
    pub const INFEASIBLE: i32 = 4;
    pub const MISMATCH: i32 = 5;
    pub const RESOLUTION: i32 = 6;
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("budget {total} is infeasible: sending all {batch_size} instances to the cheapest head costs T*min B = {minimum}")]
    InfeasibleBudget {
        total: f64,
        batch_size: usize,
        minimum: f64,
    },

    #[error("the dataset has no {0} split")]
    MissingSplit(&'static str),

    #[error("head risks are neither in the manifest nor computable from a labeled train split")]
    MissingRisks,

    #[error(transparent)]
    Domain(#[from] DomainError),

    #[error(transparent)]
    Allocation(#[from] AllocationError),

    #[error(transparent)]
    Calibration(#[from] CalibrationError),

    #[error(transparent)]
    Inference(#[from] InferenceError),

    #[error(transparent)]
    Oracle(#[from] OracleError),

    #[error(transparent)]
    Io(#[from] IoError),

    #[error(transparent)]
    Synth(#[from] SynthError),

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        use exit_code::*;
        match self {
            PipelineError::InfeasibleBudget { .. }
            | PipelineError::Domain(DomainError::InfeasibleBudget { .. })
            | PipelineError::Allocation(AllocationError::InfeasibleBudget { .. })
            | PipelineError::Allocation(AllocationError::BudgetBelowMinimum { .. })
            | PipelineError::Oracle(OracleError::InfeasibleBudget { .. })
            | PipelineError::Oracle(OracleError::NoExactAssignment { .. }) => INFEASIBLE,
            PipelineError::Inference(_)
            | PipelineError::Calibration(CalibrationError::HeadCountMismatch { .. }) => MISMATCH,
            PipelineError::Oracle(OracleError::ResolutionTooCoarse { .. }) => RESOLUTION,
            PipelineError::Io(IoError::MissingLabels(_)) => INVALID,
            PipelineError::Io(_) => IO,
            _ => INVALID,
        }
    }
}

/// Calibration settings besides the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrateConfig {
    pub budget: BudgetSpec,
    pub beta: f64,
    pub score: ScoreSpec,
    pub correction: Correction,
}

impl CalibrateConfig {
    pub fn new(budget: BudgetSpec) -> Self {
        Self {
            budget,
            beta: DEFAULT_BETA,
            score: ScoreSpec::default(),
            correction: Correction::default(),
        }
    }
}

/// Everything `calibrate` decided, written as the policy file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub budget: BudgetSpec,
    pub beta: f64,
    pub correction: Correction,
    pub risks: Vec<f64>,
    pub prior: Vec<f64>,
    pub allocation: AllocationResult,
    pub policy: ExitPolicy,
}

/// Manifest risks if every head has one, else risks on the labeled train split.
pub fn resolve_risks(dataset: &Dataset) -> Result<Vec<f64>, PipelineError> {
    if let Some(r) = dataset.calib.bank.risks() {
        return Ok(r);
    }
    match &dataset.train {
        Some(train) if train.labels.is_some() => Ok(compute_risks(train, Split::Train.name())?),
        _ => Err(PipelineError::MissingRisks),
    }
}

fn check_budget(budget: &BudgetSpec, budgets: &[f64]) -> Result<(), PipelineError> {
    let min = budgets.iter().copied().fold(f64::INFINITY, f64::min);
    let minimum = min * budget.batch_size() as f64;
    if budget.total_budget() < minimum * (1.0 - 1e-9) {
        return Err(PipelineError::InfeasibleBudget {
            total: budget.total_budget(),
            batch_size: budget.batch_size(),
            minimum,
        });
    }
    Ok(())
}

/// Allocation plus thresholds from precomputed calibration CDFs.
pub fn calibrate_from_cdfs(
    cdfs: &[ScoreCdf],
    budgets: &[f64],
    risks: &[f64],
    config: &CalibrateConfig,
) -> Result<Calibration, PipelineError> {
    check_budget(&config.budget, budgets)?;
    let prior = default_prior(budgets);
    let problem = AllocationProblem::new(
        risks.to_vec(),
        budgets.to_vec(),
        prior.clone(),
        config.beta,
        config.budget.mean_budget(),
    )?;
    let allocation = solve_allocation(&problem)?;
    let policy = policy_from_cdfs(cdfs, budgets, &allocation, &config.score, config.correction)?;
    Ok(Calibration {
        budget: config.budget,
        beta: config.beta,
        correction: config.correction,
        risks: risks.to_vec(),
        prior,
        allocation,
        policy,
    })
}

pub fn calibrate(
    dataset: &Dataset,
    config: &CalibrateConfig,
) -> Result<Calibration, PipelineError> {
    let budgets = dataset.budgets();
    check_budget(&config.budget, &budgets)?;
    let risks = resolve_risks(dataset)?;
    let cdfs = build_cdfs(&dataset.calib.bank, Split::Calib, &config.score)?;
    calibrate_from_cdfs(&cdfs, &budgets, &risks, config)
}

fn test_split(dataset: &Dataset) -> Result<&SplitData, PipelineError> {
    dataset
        .test
        .as_ref()
        .ok_or(PipelineError::MissingSplit("test"))
}

/// The calibrated budget scaled to a batch of `t` instances.
pub fn budget_for_batch(budget: &BudgetSpec, t: usize) -> Result<BudgetSpec, DomainError> {
    if t == budget.batch_size() {
        Ok(*budget)
    } else {
        BudgetSpec::new(budget.mean_budget() * t as f64, t)
    }
}

/// Summary of one run, as written to `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub summary: BatchSummary,
    pub budget: BudgetReport,
}

/// Runs the calibrated policy on the test split.
pub fn infer(
    dataset: &Dataset,
    calibration: &Calibration,
) -> Result<(BatchResult, RunReport), PipelineError> {
    let test = test_split(dataset)?;
    let result = classify_batch(&test.bank, &calibration.policy, test.labels.as_deref())?;
    let budget = budget_for_batch(&calibration.budget, test.bank.num_instances())?;
    let report = RunReport {
        summary: result.summary(false),
        budget: measure_budget(&result, &budget),
    };
    Ok((result, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub mode: OracleMode,
    /// Greedy upgrades instead of the exact DP.
    pub fast: bool,
    pub resolution: Option<f64>,
    /// Judge correctness by jittered predictions from this spec.
    pub jitter: Option<ScoreSpec>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            mode: OracleMode::AtMostBudget,
            fast: false,
            resolution: None,
            jitter: None,
        }
    }
}

fn oracle_instance(
    test: &SplitData,
    budget: f64,
    config: &OracleConfig,
) -> Result<OracleInstance, PipelineError> {
    let labels = test
        .labels
        .as_deref()
        .ok_or(IoError::MissingLabels(Split::Test.name()))?;
    let jitter = config.jitter.as_ref().map(|s| (s, Split::Test));
    Ok(OracleInstance::from_bank(
        &test.bank,
        labels,
        jitter,
        budget,
        config.mode,
    )?)
}

fn solve_oracle(
    instance: &OracleInstance,
    config: &OracleConfig,
) -> Result<OracleSolution, PipelineError> {
    Ok(if config.fast {
        oracle_greedy(instance)?
    } else {
        oracle_exact(instance, config.resolution)?
    })
}

/// Best achievable assignment of the labeled test split under total budget `total`.
pub fn run_oracle(
    dataset: &Dataset,
    total: f64,
    config: &OracleConfig,
) -> Result<(OracleSolution, RunReport), PipelineError> {
    let test = test_split(dataset)?;
    let t = test.bank.num_instances();
    let budget = BudgetSpec::new(total, t)?;
    let instance = oracle_instance(test, total, config)?;
    let solution = solve_oracle(&instance, config)?;
    let summary = solution.summary(test.bank.num_heads());
    let report = RunReport {
        budget: BudgetReport {
            consumed: solution.cost,
            allowed: total,
            utilization: solution.cost / budget.total_budget(),
            within_budget: solution.cost <= total,
        },
        summary,
    };
    Ok((solution, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub beta: f64,
    pub score: ScoreSpec,
    pub correction: Correction,
    pub oracle: OracleConfig,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            score: ScoreSpec::default(),
            correction: Correction::default(),
            oracle: OracleConfig::default(),
            jobs: 0,
        }
    }
}

/// For each total budget: recalibrate, infer and solve the oracle on the
/// test split, plus every head used alone. Rows come out in budget order,
/// `M + 2` per budget.
pub fn sweep(
    dataset: &Dataset,
    budgets: &[f64],
    config: &SweepConfig,
) -> Result<Vec<SweepRow>, PipelineError> {
    let test = test_split(dataset)?;
    let labels = test
        .labels
        .as_deref()
        .ok_or(IoError::MissingLabels(Split::Test.name()))?;
    let t = test.bank.num_instances();
    let head_budgets = dataset.budgets();
    let risks = resolve_risks(dataset)?;
    for &b in budgets {
        check_budget(&BudgetSpec::new(b, t)?, &head_budgets)?;
    }
    let cdfs = build_cdfs(&dataset.calib.bank, Split::Calib, &config.score)?;
    let base_oracle = oracle_instance(
        test,
        budgets.iter().copied().fold(0.0, f64::max),
        &config.oracle,
    )?;

    let table = ScoreTable::compute(&test.bank, Split::Test, &config.score);
    let head_accuracy: Vec<f64> = table
        .predictions
        .iter()
        .map(|preds| preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / t as f64)
        .collect();

    let point = |total: f64| -> Result<Vec<SweepRow>, PipelineError> {
        let spec = BudgetSpec::new(total, t)?;
        let calib_config = CalibrateConfig {
            budget: spec,
            beta: config.beta,
            score: config.score,
            correction: config.correction,
        };
        let calibration = calibrate_from_cdfs(&cdfs, &head_budgets, &risks, &calib_config)?;
        let result = classify_batch(&test.bank, &calibration.policy, Some(labels))?;
        let oracle = solve_oracle(&base_oracle.with_budget(total), &config.oracle)?;
        let mut rows = vec![
            SweepRow {
                budget: total,
                accuracy: result.accuracy.unwrap_or(0.0),
                consumed: result.consumed_budget,
                within_budget: result.consumed_budget <= total,
                source: SweepSource::Eero,
            },
            SweepRow {
                budget: total,
                accuracy: oracle.accuracy,
                consumed: oracle.cost,
                within_budget: oracle.cost <= total,
                source: SweepSource::Oracle,
            },
        ];
        for (l, (&acc, &b)) in head_accuracy.iter().zip(&head_budgets).enumerate() {
            let consumed = b * t as f64;
            rows.push(SweepRow {
                budget: total,
                accuracy: acc,
                consumed,
                within_budget: consumed <= total,
                source: SweepSource::Head(l),
            });
        }
        Ok(rows)
    };

    let run = || {
        budgets
            .par_iter()
            .map(|&b| point(b))
            .collect::<Result<Vec<_>, _>>()
    };
    let per_budget = if config.jobs == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| PipelineError::ThreadPool(e.to_string()))?
            .install(run)?
    };
    Ok(per_budget.into_iter().flatten().collect())
}
