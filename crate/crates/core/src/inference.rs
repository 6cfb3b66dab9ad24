//! Batch routing through the exit heads.
//!
//! Each instance visits heads in order and leaves at the first head whose
//! jittered score reaches that head's calibrated threshold. The last head
//! always accepts. The instance is charged the exit head's cost, which
//! already includes every layer it went through.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{classifies_by_cdf, ScoreCdf};
use crate::domain::{BatchResult, BudgetSpec, ExitPolicy, HeadBank, Split};
use crate::scoring::{score_row, ScoreSpec, ScoreTable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("policy has {policy} heads but the bank has {bank}")]
    HeadCountMismatch { policy: usize, bank: usize },

    #[error("head {head} costs {bank} GFlops in the bank but {policy} in the policy")]
    BudgetMismatch { head: usize, policy: f64, bank: f64 },

    #[error("{labels} labels for {instances} instances")]
    LabelLengthMismatch { labels: usize, instances: usize },
}

/// Routes one instance. `score_at(l)` returns the jittered score and
/// prediction of head `l` and is only called for heads actually visited.
/// Returns `(exit_head, prediction)`.
pub fn route_instance<F>(policy: &ExitPolicy, mut score_at: F) -> (usize, usize)
where
    F: FnMut(usize) -> (f64, usize),
{
    let thresholds = policy.thresholds();
    let last = thresholds.len() - 1;
    for (l, &t) in thresholds.iter().enumerate() {
        let (score, prediction) = score_at(l);
        if l == last || score >= t {
            return (l, prediction);
        }
    }
    unreachable!("the final head always accepts")
}

fn check_compatible(
    bank: &HeadBank,
    policy: &ExitPolicy,
    labels: Option<&[usize]>,
) -> Result<(), InferenceError> {
    if policy.num_heads() != bank.num_heads() {
        return Err(InferenceError::HeadCountMismatch {
            policy: policy.num_heads(),
            bank: bank.num_heads(),
        });
    }
    for (head, (&p, b)) in policy.head_budgets().iter().zip(bank.budgets()).enumerate() {
        if p != b {
            return Err(InferenceError::BudgetMismatch {
                head,
                policy: p,
                bank: b,
            });
        }
    }
    if let Some(ys) = labels {
        if ys.len() != bank.num_instances() {
            return Err(InferenceError::LabelLengthMismatch {
                labels: ys.len(),
                instances: bank.num_instances(),
            });
        }
    }
    Ok(())
}

/// Classifies every row of a test bank under `policy`.
pub fn classify_batch(
    bank: &HeadBank,
    policy: &ExitPolicy,
    labels: Option<&[usize]>,
) -> Result<BatchResult, InferenceError> {
    classify_split(bank, Split::Test, policy, labels)
}

/// As [`classify_batch`], drawing jitter from the key range of `split`.
pub fn classify_split(
    bank: &HeadBank,
    split: Split,
    policy: &ExitPolicy,
    labels: Option<&[usize]>,
) -> Result<BatchResult, InferenceError> {
    check_compatible(bank, policy, labels)?;
    let spec = policy.score_spec();
    let offset = split.key_offset();
    let decisions: Vec<(usize, usize)> = (0..bank.num_instances())
        .into_par_iter()
        .map_init(Vec::new, |scratch, i| {
            route_instance(policy, |l| {
                score_row(bank.head(l).row(i), l, offset + i as u64, &spec, scratch)
            })
        })
        .collect();
    let (exits, predictions) = decisions.into_iter().unzip();
    Ok(BatchResult::from_assignment(
        exits,
        predictions,
        &bank.budgets(),
        labels,
    ))
}

/// Reference router that evaluates `F_l(score) >= 1 - rate_l` directly on
/// the calibration CDFs instead of comparing against thresholds.
pub fn classify_batch_by_cdf(
    bank: &HeadBank,
    split: Split,
    cdfs: &[ScoreCdf],
    seq_rates: &[f64],
    spec: &ScoreSpec,
    labels: Option<&[usize]>,
) -> BatchResult {
    let table = ScoreTable::compute(bank, split, spec);
    let m = bank.num_heads();
    let (exits, predictions): (Vec<usize>, Vec<usize>) = (0..bank.num_instances())
        .map(|i| {
            let l = (0..m)
                .find(|&l| {
                    l == m - 1 || classifies_by_cdf(&cdfs[l], table.scores[l][i], seq_rates[l])
                })
                .unwrap();
            (l, table.predictions[l][i])
        })
        .unzip();
    BatchResult::from_assignment(exits, predictions, &bank.budgets(), labels)
}

/// Consumed versus allowed budget for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub consumed: f64,
    pub allowed: f64,
    pub utilization: f64,
    pub within_budget: bool,
}

pub fn measure_budget(result: &BatchResult, budget: &BudgetSpec) -> BudgetReport {
    let allowed = budget.total_budget();
    BudgetReport {
        consumed: result.consumed_budget,
        allowed,
        utilization: result.consumed_budget / allowed,
        within_budget: result.consumed_budget <= allowed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::HeadSlice;
    use crate::scoring::ScoreKind;

    fn bank() -> HeadBank {
        let rows = [[0.9, 0.1], [0.6, 0.4], [0.2, 0.8], [0.5, 0.5]];
        let heads = [1.0, 2.0, 4.0]
            .iter()
            .map(|&b| HeadSlice::new(rows.concat(), 2, b, None).unwrap())
            .collect();
        HeadBank::new(heads).unwrap()
    }

    fn policy(rates: Vec<f64>, thresholds: Vec<f64>) -> ExitPolicy {
        ExitPolicy::new(
            ScoreSpec::new(ScoreKind::MaxProb, 0.0, 1),
            rates,
            thresholds,
            4,
            vec![1.0, 2.0, 4.0],
        )
        .unwrap()
    }

    #[test]
    fn everything_exits_at_the_first_head() {
        let inf = f64::NEG_INFINITY;
        let r = classify_batch(
            &bank(),
            &policy(vec![1.0; 3], vec![inf; 3]),
            Some(&[0, 0, 1, 1]),
        )
        .unwrap();
        assert_eq!(r.exits, vec![0; 4]);
        assert_eq!(r.consumed_budget, 4.0);
        assert_eq!(r.predictions, vec![0, 0, 1, 0]);
        assert_eq!(r.accuracy, Some(0.75));
        assert_eq!(r.exit_proportions, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn nothing_exits_early_above_every_score() {
        let p = policy(vec![1e-9, 1e-9, 1.0], vec![2.0, 2.0, f64::NEG_INFINITY]);
        let r = classify_batch(&bank(), &p, None).unwrap();
        assert_eq!(r.exits, vec![2; 4]);
        assert_eq!(r.consumed_budget, 16.0);
        assert_eq!(r.accuracy, None);
        let report = measure_budget(&r, &BudgetSpec::new(16.0, 4).unwrap());
        assert_eq!(report.utilization, 1.0);
        assert!(report.within_budget);
    }

    #[test]
    fn threshold_routing() {
        let p = policy(vec![0.3, 0.6, 1.0], vec![0.85, 0.6, f64::NEG_INFINITY]);
        let r = classify_batch(&bank(), &p, None).unwrap();
        assert_eq!(r.exits, vec![0, 1, 1, 2]);
        assert_eq!(r.per_instance_cost, vec![1.0, 2.0, 2.0, 4.0]);
        assert_eq!(r.consumed_budget, 9.0);
    }

    #[test]
    fn lazy_router_visits_only_needed_heads() {
        let p = policy(vec![0.3, 0.6, 1.0], vec![0.85, 0.6, f64::NEG_INFINITY]);
        let mut visited = Vec::new();
        let out = route_instance(&p, |l| {
            visited.push(l);
            ([0.5, 0.7, 0.0][l], l)
        });
        assert_eq!(out, (1, 1));
        assert_eq!(visited, vec![0, 1]);
    }

    #[test]
    fn mismatches_are_reported() {
        let two = ExitPolicy::new(
            ScoreSpec::default(),
            vec![0.5, 1.0],
            vec![0.1, f64::NEG_INFINITY],
            4,
            vec![1.0, 2.0],
        )
        .unwrap();
        assert_eq!(
            classify_batch(&bank(), &two, None),
            Err(InferenceError::HeadCountMismatch { policy: 2, bank: 3 })
        );
        let inf = f64::NEG_INFINITY;
        let other_costs = ExitPolicy::new(
            ScoreSpec::default(),
            vec![1.0; 3],
            vec![inf; 3],
            4,
            vec![1.0, 2.0, 5.0],
        )
        .unwrap();
        assert!(matches!(
            classify_batch(&bank(), &other_costs, None),
            Err(InferenceError::BudgetMismatch { head: 2, .. })
        ));
        assert_eq!(
            classify_batch(&bank(), &policy(vec![1.0; 3], vec![inf; 3]), Some(&[0, 1])),
            Err(InferenceError::LabelLengthMismatch {
                labels: 2,
                instances: 4
            })
        );
    }

    #[test]
    fn measure_budget_arithmetic() {
        let r = BatchResult::from_assignment(vec![0; 9], vec![0; 9], &[10.0, 20.0], None);
        let report = measure_budget(&r, &BudgetSpec::new(100.0, 9).unwrap());
        assert_eq!(report.consumed, 90.0);
        assert_eq!(report.utilization, 0.9);
        assert!(report.within_budget);
    }
}
