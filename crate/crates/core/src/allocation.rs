//! Budget-constrained allocation of classification rates across heads.
//!
//! The rate vector minimizes `sum eps_l R_l + beta * KL(eps || prior)` over
//! the simplex subject to `sum eps_l B_l <= mean_budget`. Its solution is a
//! Gibbs distribution
//!
//! ```text
//! eps_l(mu) ∝ prior_l * exp(-(R_l + mu * B_l) / beta)
//! ```
//!
//! where the multiplier `mu >= 0` is zero when the unconstrained solution
//! already fits the budget and otherwise solves `sum eps_l(mu) B_l = mean_budget`.
//! The expected budget is non-increasing in `mu` (its derivative is minus
//! the Gibbs variance of the costs over `beta`), so the root is bracketed
//! and found by bisection.

use log::warn;
use thiserror::Error;

use crate::domain::AllocationResult;

/// Default temperature.
pub const DEFAULT_BETA: f64 = 0.1;

/// Relative tolerance on the budget equation. Near machine precision, so
/// bisection usually ends by exhausting the floats between its brackets.
const BUDGET_TOLERANCE: f64 = 1e-14;

/// Relative band around the cheapest head's cost treated as degenerate.
const DEGENERATE_BAND: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocationError {
    #[error("invalid allocation problem: {0}")]
    InvalidProblem(String),

    #[error("mean budget {mean_budget} is below the cheapest head cost {min_budget}")]
    InfeasibleBudget { mean_budget: f64, min_budget: f64 },

    #[error("head costs must differ, both are {0}")]
    EqualBudgets(f64),

    #[error("first head cost {first} must be below second head cost {second}")]
    NonIncreasingBudgets { first: f64, second: f64 },

    #[error("total budget {total} is below {minimum} (batch size times the cheapest head cost)")]
    BudgetBelowMinimum { total: f64, minimum: f64 },
}

/// Inverse-cost prior: `prior_l = (1/B_l) / sum_j (1/B_j)`.
pub fn default_prior(budgets: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = budgets.iter().map(|b| 1.0 / b).collect();
    let total: f64 = inv.iter().sum();
    inv.into_iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    risks: Vec<f64>,
    budgets: Vec<f64>,
    prior: Vec<f64>,
    beta: f64,
    mean_budget: f64,
}

impl AllocationProblem {
    pub fn new(
        risks: Vec<f64>,
        budgets: Vec<f64>,
        prior: Vec<f64>,
        beta: f64,
        mean_budget: f64,
    ) -> Result<Self, AllocationError> {
        let bad = |msg: String| Err(AllocationError::InvalidProblem(msg));
        let m = risks.len();
        if m == 0 || budgets.len() != m || prior.len() != m {
            return bad(format!(
                "{} risks, {} budgets, {} prior weights",
                m,
                budgets.len(),
                prior.len()
            ));
        }
        if let Some(r) = risks.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return bad(format!("risk {r} outside [0, 1]"));
        }
        if let Some(b) = budgets.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return bad(format!("head cost {b} must be finite and positive"));
        }
        if budgets.windows(2).any(|w| w[1] < w[0]) {
            return bad("head costs must be non-decreasing".into());
        }
        let prior_sum: f64 = prior.iter().sum();
        if prior.iter().any(|p| !(p.is_finite() && *p > 0.0)) || (prior_sum - 1.0).abs() > 1e-12 {
            return bad(format!(
                "prior must be strictly positive and sum to 1 (sum {prior_sum})"
            ));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return bad(format!("temperature {beta} must be finite and positive"));
        }
        if !(mean_budget.is_finite() && mean_budget > 0.0) {
            return bad(format!(
                "mean budget {mean_budget} must be finite and positive"
            ));
        }
        Ok(Self {
            risks,
            budgets,
            prior,
            beta,
            mean_budget,
        })
    }

    /// Problem with the inverse-cost prior.
    pub fn with_default_prior(
        risks: Vec<f64>,
        budgets: Vec<f64>,
        beta: f64,
        mean_budget: f64,
    ) -> Result<Self, AllocationError> {
        let prior = default_prior(&budgets);
        Self::new(risks, budgets, prior, beta, mean_budget)
    }

    pub fn num_heads(&self) -> usize {
        self.risks.len()
    }

    pub fn risks(&self) -> &[f64] {
        &self.risks
    }

    pub fn budgets(&self) -> &[f64] {
        &self.budgets
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mean_budget(&self) -> f64 {
        self.mean_budget
    }

    /// Expected per-instance cost `sum eps_l B_l`.
    pub fn expected_budget(&self, eps: &[f64]) -> f64 {
        eps.iter().zip(&self.budgets).map(|(e, b)| e * b).sum()
    }

    /// `sum eps_l R_l + beta * KL(eps || prior)`.
    pub fn objective(&self, eps: &[f64]) -> f64 {
        let risk: f64 = eps.iter().zip(&self.risks).map(|(e, r)| e * r).sum();
        risk + self.beta * kl_divergence(eps, &self.prior)
    }
}

/// `KL(p || q)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Normalizes log-weights onto the simplex with the log-sum-exp shift.
fn softmax_from_logs(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Gibbs rates for a given multiplier, computed in log space.
pub fn gibbs_epsilons(problem: &AllocationProblem, mu: f64) -> Vec<f64> {
    let logs: Vec<f64> = problem
        .prior
        .iter()
        .zip(&problem.risks)
        .zip(&problem.budgets)
        .map(|((p, r), b)| p.ln() - (r + mu * b) / problem.beta)
        .collect();
    softmax_from_logs(&logs)
}

fn result_for(
    problem: &AllocationProblem,
    eps: Vec<f64>,
    mu: f64,
    degenerate: bool,
) -> AllocationResult {
    AllocationResult {
        expected_budget: problem.expected_budget(&eps),
        kl_to_prior: kl_divergence(&eps, &problem.prior),
        epsilons: eps,
        multiplier: mu,
        saturated: mu > 0.0,
        degenerate,
    }
}

/// Limit of the Gibbs rates as `mu -> inf`: all mass on the cheapest
/// heads, split by `prior_l * exp(-R_l / beta)` among exact ties.
fn cheapest_head_limit(problem: &AllocationProblem) -> AllocationResult {
    let min = problem.budgets[0];
    let logs: Vec<f64> = problem
        .prior
        .iter()
        .zip(&problem.risks)
        .zip(&problem.budgets)
        .map(|((p, r), &b)| {
            if b == min {
                p.ln() - r / problem.beta
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    result_for(problem, softmax_from_logs(&logs), f64::INFINITY, true)
}

/// Solves for the rate vector and its budget multiplier.
pub fn solve_allocation(problem: &AllocationProblem) -> Result<AllocationResult, AllocationError> {
    let mean = problem.mean_budget;
    let min = problem.budgets[0];
    if mean < min - DEGENERATE_BAND * mean {
        return Err(AllocationError::InfeasibleBudget {
            mean_budget: mean,
            min_budget: min,
        });
    }

    let excess = |mu: f64| problem.expected_budget(&gibbs_epsilons(problem, mu)) - mean;

    let free = gibbs_epsilons(problem, 0.0);
    if problem.expected_budget(&free) <= mean {
        return Ok(result_for(problem, free, 0.0, false));
    }
    if mean <= min + DEGENERATE_BAND * mean {
        return Ok(cheapest_head_limit(problem));
    }

    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while excess(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Ok(cheapest_head_limit(problem));
        }
    }

    // Invariant: excess(lo) > 0 >= excess(hi). Stop on the feasible side.
    let tol = BUDGET_TOLERANCE * mean;
    loop {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        let g = excess(mid);
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
            if g >= -tol {
                break;
            }
        }
    }
    Ok(result_for(problem, gibbs_epsilons(problem, hi), hi, false))
}

/// Closed-form early-exit rate with one auxiliary head: the fraction of the
/// batch sent to the cheap head so that `T (eps b1 + (1 - eps) b2) = B`.
/// Clamped to `[0, 1]`.
pub fn single_head_rate(
    b1: f64,
    b2: f64,
    total_budget: f64,
    batch_size: usize,
) -> Result<f64, AllocationError> {
    if b1 == b2 {
        return Err(AllocationError::EqualBudgets(b1));
    }
    if b1 > b2 {
        return Err(AllocationError::NonIncreasingBudgets {
            first: b1,
            second: b2,
        });
    }
    let t = batch_size as f64;
    let (low, high) = (t * b1, t * b2);
    if batch_size == 0 || total_budget < low {
        return Err(AllocationError::BudgetBelowMinimum {
            total: total_budget,
            minimum: low,
        });
    }
    if total_budget > high {
        warn!("budget {total_budget} exceeds {high}, every instance can use the final head");
    }
    // Written over the batch totals so the endpoints come out exactly 0 and 1.
    Ok(((total_budget - high) / (low - high)).clamp(0.0, 1.0))
}
