//! Budget-constrained best-possible head assignment.
//!
//! Given which heads classify each instance correctly, pick one head per
//! instance to maximize the number of correct answers with total cost at
//! most (or exactly) the budget. This is a multiple-choice knapsack; costs
//! are scaled to integer units and solved by dynamic programming.
//!
//! With at-most-budget semantics and 0/1 values, an instance only ever
//! needs two options: its cheapest head, and its cheapest correct head.
//! Every other option is dominated, so the DP runs as a 0/1 knapsack over
//! those upgrades. The exact-budget variant keeps all options.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BatchSummary, HeadBank, Split};
use crate::scoring::{head_predict, ScoreSpec, ScoreTable};

/// Upper bound on `T * M` correctness cells.
pub const MAX_CELLS: usize = 10_000_000;

/// Upper bound on DP table size (bits for at-most mode, bytes for exact mode).
const MAX_DP_CELLS: u64 = 2_000_000_000;

/// Fallback number of budget units when costs share no decimal grid.
const FALLBACK_UNITS: f64 = 1e5;

/// Largest unit count accepted for a grid-derived resolution.
const MAX_GRID_UNITS: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Total cost must not exceed the budget.
    #[default]
    AtMostBudget,
    /// Total cost must equal the budget.
    ExactBudget,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("budget {budget} is below {minimum}, the cost of sending every instance to the cheapest head")]
    InfeasibleBudget { budget: f64, minimum: f64 },

    #[error("no assignment spends exactly {budget}")]
    NoExactAssignment { budget: f64 },

    #[error("resolution {resolution} is too coarse for budget {budget}")]
    ResolutionTooCoarse { resolution: f64, budget: f64 },

    #[error("problem too large: {cells} cells")]
    ProblemTooLarge { cells: u64 },

    #[error("invalid oracle instance: {0}")]
    InvalidInstance(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleInstance {
    /// Row-major `T x M`: `correct[i * M + l]`.
    correct: Vec<bool>,
    num_instances: usize,
    costs: Vec<f64>,
    budget: f64,
    mode: OracleMode,
}

impl OracleInstance {
    pub fn new(
        correct: Vec<Vec<bool>>,
        costs: Vec<f64>,
        budget: f64,
        mode: OracleMode,
    ) -> Result<Self, OracleError> {
        let m = costs.len();
        let bad = |msg: String| Err(OracleError::InvalidInstance(msg));
        if m == 0 || m > u8::MAX as usize {
            return bad(format!("{m} heads (expected 1 to 255)"));
        }
        if let Some(row) = correct.iter().position(|r| r.len() != m) {
            return bad(format!(
                "row {row} has {} entries for {m} heads",
                correct[row].len()
            ));
        }
        if costs.iter().any(|c| !(c.is_finite() && *c > 0.0))
            || costs.windows(2).any(|w| w[1] <= w[0])
        {
            return bad("head costs must be positive and strictly increasing".into());
        }
        if !(budget.is_finite() && budget > 0.0) {
            return bad(format!("budget {budget} must be positive"));
        }
        let cells = correct.len() as u64 * m as u64;
        if cells > MAX_CELLS as u64 {
            return Err(OracleError::ProblemTooLarge { cells });
        }
        Ok(Self {
            num_instances: correct.len(),
            correct: correct.concat(),
            costs,
            budget,
            mode,
        })
    }

    /// Correctness of each head on a labeled bank. With `jitter = None` the
    /// raw argmax is used; otherwise predictions match the policy path.
    pub fn from_bank(
        bank: &HeadBank,
        labels: &[usize],
        jitter: Option<(&ScoreSpec, Split)>,
        budget: f64,
        mode: OracleMode,
    ) -> Result<Self, OracleError> {
        if labels.len() != bank.num_instances() {
            return Err(OracleError::InvalidInstance(format!(
                "{} labels for {} instances",
                labels.len(),
                bank.num_instances()
            )));
        }
        let m = bank.num_heads();
        let correct = match jitter {
            Some((spec, split)) => {
                let table = ScoreTable::compute(bank, split, spec);
                (0..bank.num_instances())
                    .map(|i| {
                        (0..m)
                            .map(|l| table.predictions[l][i] == labels[i])
                            .collect()
                    })
                    .collect()
            }
            None => (0..bank.num_instances())
                .map(|i| {
                    (0..m)
                        .map(|l| head_predict(bank.head(l).row(i)) == labels[i])
                        .collect()
                })
                .collect(),
        };
        Self::new(correct, bank.budgets(), budget, mode)
    }

    pub fn num_instances(&self) -> usize {
        self.num_instances
    }

    pub fn num_heads(&self) -> usize {
        self.costs.len()
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    pub fn is_correct(&self, i: usize, l: usize) -> bool {
        self.correct[i * self.costs.len() + l]
    }

    /// Same correctness data at another budget.
    pub fn with_budget(&self, budget: f64) -> Self {
        Self {
            budget,
            ..self.clone()
        }
    }

    pub fn evaluate(&self, assignment: &[usize]) -> OracleSolution {
        let correct = assignment
            .iter()
            .enumerate()
            .filter(|&(i, &l)| self.is_correct(i, l))
            .count();
        let cost = assignment.iter().map(|&l| self.costs[l]).sum();
        OracleSolution {
            assignment: assignment.to_vec(),
            correct,
            accuracy: if assignment.is_empty() {
                0.0
            } else {
                correct as f64 / assignment.len() as f64
            },
            cost,
        }
    }

    fn minimum_cost(&self) -> f64 {
        self.num_instances as f64 * self.costs[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    /// 0-based head per instance.
    pub assignment: Vec<usize>,
    pub correct: usize,
    pub accuracy: f64,
    pub cost: f64,
}

impl OracleSolution {
    pub fn summary(&self, num_heads: usize) -> BatchSummary {
        let t = self.assignment.len();
        let mut counts = vec![0usize; num_heads];
        for &l in &self.assignment {
            counts[l] += 1;
        }
        BatchSummary {
            oracle: true,
            num_instances: t,
            consumed_budget: self.cost,
            accuracy: Some(self.accuracy),
            exit_proportions: counts
                .into_iter()
                .map(|c| if t == 0 { 0.0 } else { c as f64 / t as f64 })
                .collect(),
        }
    }
}

fn near_integer(x: f64) -> Option<u64> {
    let r = x.round();
    if r >= 0.0 && (x - r).abs() <= 1e-9 * r.max(1.0) {
        Some(r as u64)
    } else {
        None
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Largest `g / 10^d` dividing every cost, for the smallest decimal scale
/// `10^d` (`d <= 6`) putting all costs on integers; otherwise `budget / 1e5`.
pub fn default_resolution(costs: &[f64], budget: f64) -> f64 {
    for d in 0..=6 {
        let scale = 10f64.powi(d);
        let ints: Option<Vec<u64>> = costs.iter().map(|c| near_integer(c * scale)).collect();
        if let Some(ints) = ints {
            let g = ints.iter().copied().fold(0, gcd);
            if g > 0 {
                let res = g as f64 / scale;
                if budget / res <= MAX_GRID_UNITS {
                    return res;
                }
            }
            break;
        }
    }
    budget / FALLBACK_UNITS
}

/// Integer costs (rounded up) and integer budget (rounded down).
fn to_units(x: f64, resolution: f64) -> u64 {
    let q = x / resolution;
    near_integer(q).unwrap_or_else(|| q.ceil() as u64)
}

fn budget_units(budget: f64, resolution: f64) -> u64 {
    let q = budget / resolution;
    near_integer(q).unwrap_or_else(|| q.floor() as u64)
}

/// Exact DP over integer-scaled costs. `resolution = None` picks
/// [`default_resolution`]. Rounding costs up keeps the returned assignment
/// within the true budget.
pub fn oracle_exact(
    instance: &OracleInstance,
    resolution: Option<f64>,
) -> Result<OracleSolution, OracleError> {
    if instance.minimum_cost() > instance.budget * (1.0 + 1e-12) {
        return Err(OracleError::InfeasibleBudget {
            budget: instance.budget,
            minimum: instance.minimum_cost(),
        });
    }
    let resolution =
        resolution.unwrap_or_else(|| default_resolution(&instance.costs, instance.budget));
    if !(resolution.is_finite() && resolution > 0.0) {
        return Err(OracleError::InvalidInstance(format!(
            "resolution {resolution} must be positive"
        )));
    }
    let units: Vec<u64> = instance
        .costs
        .iter()
        .map(|&c| to_units(c, resolution))
        .collect();
    let cap = budget_units(instance.budget, resolution);
    let t = instance.num_instances as u64;
    if t * units[0] > cap {
        return Err(OracleError::ResolutionTooCoarse {
            resolution,
            budget: instance.budget,
        });
    }
    let assignment = match instance.mode {
        OracleMode::AtMostBudget => at_most_dp(instance, &units, cap)?,
        OracleMode::ExactBudget => {
            let on_grid = instance
                .costs
                .iter()
                .all(|c| near_integer(c / resolution).is_some());
            if !on_grid {
                return Err(OracleError::ResolutionTooCoarse {
                    resolution,
                    budget: instance.budget,
                });
            }
            if near_integer(instance.budget / resolution).is_none() {
                return Err(OracleError::NoExactAssignment {
                    budget: instance.budget,
                });
            }
            exact_dp(instance, &units, cap)?
        }
    };
    Ok(instance.evaluate(&assignment))
}

/// 0/1 knapsack over "upgrade to the cheapest correct head" moves.
fn at_most_dp(
    instance: &OracleInstance,
    units: &[u64],
    cap: u64,
) -> Result<Vec<usize>, OracleError> {
    let t = instance.num_instances;
    let mut assignment = vec![0usize; t];
    // (instance, target head, extra units)
    let mut upgrades = Vec::new();
    for (i, slot) in assignment.iter_mut().enumerate() {
        if instance.is_correct(i, 0) {
            continue;
        }
        if let Some(l) = (1..instance.num_heads()).find(|&l| instance.is_correct(i, l)) {
            let extra = units[l] - units[0];
            if extra == 0 {
                *slot = l;
            } else {
                upgrades.push((i, l, extra));
            }
        }
    }
    let spare = cap - t as u64 * units[0];
    let reachable: u64 = upgrades.iter().map(|u| u.2).sum();
    let width = spare.min(reachable) as usize + 1;
    let cells = upgrades.len() as u64 * width as u64;
    if cells > MAX_DP_CELLS {
        return Err(OracleError::ProblemTooLarge { cells });
    }

    // best[e]: most upgrades with extra cost exactly e, -1 if unreachable.
    let mut best = vec![-1i64; width];
    best[0] = 0;
    let words = width.div_ceil(64);
    let mut taken = vec![0u64; upgrades.len() * words];
    for (j, &(_, _, extra)) in upgrades.iter().enumerate() {
        let d = extra as usize;
        if d >= width {
            continue;
        }
        let row = &mut taken[j * words..(j + 1) * words];
        for e in (d..width).rev() {
            let prev = best[e - d];
            if prev >= 0 && prev + 1 > best[e] {
                best[e] = prev + 1;
                row[e / 64] |= 1 << (e % 64);
            }
        }
    }
    // Most upgrades first, then the cheapest way to get them.
    let (mut e, _) = best
        .iter()
        .enumerate()
        .fold((0, -1), |acc, (e, &v)| if v > acc.1 { (e, v) } else { acc });
    for (j, &(i, l, extra)) in upgrades.iter().enumerate().rev() {
        if taken[j * words + e / 64] >> (e % 64) & 1 == 1 {
            assignment[i] = l;
            e -= extra as usize;
        }
    }
    debug_assert_eq!(e, 0);
    Ok(assignment)
}

/// Multiple-choice knapsack with the total pinned to `cap` units.
fn exact_dp(instance: &OracleInstance, units: &[u64], cap: u64) -> Result<Vec<usize>, OracleError> {
    let t = instance.num_instances;
    let m = instance.num_heads();
    let width = cap as usize + 1;
    let cells = t as u64 * width as u64;
    if cells > MAX_DP_CELLS {
        return Err(OracleError::ProblemTooLarge { cells });
    }
    const NONE: i64 = i64::MIN;
    let mut best = vec![NONE; width];
    best[0] = 0;
    let mut choice = vec![u8::MAX; t * width];
    let mut next = vec![NONE; width];
    for i in 0..t {
        next.iter_mut().for_each(|v| *v = NONE);
        let row = &mut choice[i * width..(i + 1) * width];
        for (u, &value) in best.iter().enumerate() {
            if value == NONE {
                continue;
            }
            for (l, &c) in units.iter().enumerate().take(m) {
                let v = u + c as usize;
                if v >= width {
                    break;
                }
                let gain = value + instance.is_correct(i, l) as i64;
                if gain > next[v] {
                    next[v] = gain;
                    row[v] = l as u8;
                }
            }
        }
        std::mem::swap(&mut best, &mut next);
    }
    if best[cap as usize] == NONE {
        return Err(OracleError::NoExactAssignment {
            budget: instance.budget,
        });
    }
    let mut assignment = vec![0usize; t];
    let mut u = cap as usize;
    for i in (0..t).rev() {
        let l = choice[i * width + u] as usize;
        assignment[i] = l;
        u -= units[l] as usize;
    }
    Ok(assignment)
}

/// Ratio-greedy baseline: start at the cheapest head and apply upgrades in
/// order of gained correct answers per unit cost while the budget allows.
/// Uses true (unscaled) costs and never exceeds the budget.
pub fn oracle_greedy(instance: &OracleInstance) -> Result<OracleSolution, OracleError> {
    let minimum = instance.minimum_cost();
    if minimum > instance.budget * (1.0 + 1e-12) {
        return Err(OracleError::InfeasibleBudget {
            budget: instance.budget,
            minimum,
        });
    }
    let costs = &instance.costs;
    let mut assignment = vec![0usize; instance.num_instances];
    // (ratio, instance, head, extra cost): best upgrade per instance.
    let mut candidates: Vec<(f64, usize, usize, f64)> = (0..instance.num_instances)
        .filter_map(|i| {
            let base = instance.is_correct(i, 0) as i32;
            (1..instance.num_heads())
                .filter_map(|l| {
                    let gain = instance.is_correct(i, l) as i32 - base;
                    let extra = costs[l] - costs[0];
                    (gain > 0).then(|| (gain as f64 / extra, i, l, extra))
                })
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.2.cmp(&a.2)))
        })
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut spent = minimum;
    for (_, i, l, extra) in candidates {
        if spent + extra <= instance.budget {
            spent += extra;
            assignment[i] = l;
        }
    }
    Ok(instance.evaluate(&assignment))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(rows: &[&[u8]], costs: &[f64], budget: f64, mode: OracleMode) -> OracleInstance {
        let correct = rows
            .iter()
            .map(|r| r.iter().map(|&b| b == 1).collect())
            .collect();
        OracleInstance::new(correct, costs.to_vec(), budget, mode).unwrap()
    }

    #[test]
    fn two_by_two_example() {
        let i = inst(
            &[&[0, 1], &[1, 1]],
            &[1.0, 2.0],
            3.0,
            OracleMode::AtMostBudget,
        );
        let s = oracle_exact(&i, None).unwrap();
        assert_eq!(s.assignment, vec![1, 0]);
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.cost, 3.0);
    }

    #[test]
    fn unconstrained_budget_uses_correct_heads() {
        let i = inst(
            &[&[0, 0, 1], &[0, 0, 1], &[0, 0, 1]],
            &[1.0, 2.0, 3.0],
            9.0,
            OracleMode::AtMostBudget,
        );
        let s = oracle_exact(&i, None).unwrap();
        assert_eq!(s.assignment, vec![2, 2, 2]);
        assert_eq!(s.accuracy, 1.0);
    }

    #[test]
    fn hopeless_instances_stay_on_the_cheapest_head() {
        let i = inst(
            &[&[0, 0, 0], &[0, 0, 0]],
            &[1.0, 2.0, 3.0],
            100.0,
            OracleMode::AtMostBudget,
        );
        let s = oracle_exact(&i, None).unwrap();
        assert_eq!(s.assignment, vec![0, 0]);
        assert_eq!(s.accuracy, 0.0);
        assert_eq!(s.cost, 2.0);
    }

    #[test]
    fn tie_prefers_lower_cost() {
        // Upgrading instance 0 to head 1 or instance 1 to head 2 both gain
        // one answer; the cheaper upgrade wins.
        let i = inst(
            &[&[0, 1, 1], &[0, 0, 1]],
            &[1.0, 2.0, 3.0],
            4.0,
            OracleMode::AtMostBudget,
        );
        let s = oracle_exact(&i, None).unwrap();
        assert_eq!(s.assignment, vec![1, 0]);
        assert_eq!(s.cost, 3.0);
    }

    #[test]
    fn infeasible_budget() {
        let i = inst(
            &[&[0, 1], &[1, 1]],
            &[1.0, 2.0],
            1.5,
            OracleMode::AtMostBudget,
        );
        assert!(matches!(
            oracle_exact(&i, None),
            Err(OracleError::InfeasibleBudget { .. })
        ));
        assert!(matches!(
            oracle_greedy(&i),
            Err(OracleError::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn coarse_resolution_is_reported() {
        let i = inst(
            &[&[0, 1], &[1, 1]],
            &[1.0, 2.0],
            2.5,
            OracleMode::AtMostBudget,
        );
        assert!(matches!(
            oracle_exact(&i, Some(3.0)),
            Err(OracleError::ResolutionTooCoarse { .. })
        ));
    }

    #[test]
    fn exact_mode_burns_the_whole_budget() {
        // Spending exactly 5 forces one instance to head 2 and one to head 1
        // even though head 0 is the only correct one.
        let i = inst(
            &[&[1, 0, 0], &[1, 0, 0]],
            &[1.0, 2.0, 3.0],
            5.0,
            OracleMode::ExactBudget,
        );
        let s = oracle_exact(&i, None).unwrap();
        assert_eq!(s.cost, 5.0);
        assert_eq!(s.accuracy, 0.0);
        let i = inst(
            &[&[1, 0, 0], &[0, 0, 1]],
            &[1.0, 2.0, 3.0],
            4.0,
            OracleMode::ExactBudget,
        );
        let s = oracle_exact(&i, None).unwrap();
        assert_eq!(s.assignment, vec![0, 2]);
        assert_eq!(s.accuracy, 1.0);
    }

    #[test]
    fn exact_mode_without_matching_assignment() {
        let i = inst(
            &[&[1, 0], &[1, 0]],
            &[2.0, 4.0],
            7.0,
            OracleMode::ExactBudget,
        );
        assert!(matches!(
            oracle_exact(&i, None),
            Err(OracleError::NoExactAssignment { .. })
        ));
        let i = inst(
            &[&[1, 0], &[1, 0]],
            &[2.0, 4.0],
            5.5,
            OracleMode::ExactBudget,
        );
        assert!(matches!(
            oracle_exact(&i, None),
            Err(OracleError::NoExactAssignment { .. })
        ));
    }

    #[test]
    fn greedy_equals_exact_on_symmetric_upgrades() {
        let i = inst(
            &[&[0, 1], &[0, 1], &[0, 1], &[1, 1]],
            &[1.0, 2.0],
            6.0,
            OracleMode::AtMostBudget,
        );
        let g = oracle_greedy(&i).unwrap();
        let e = oracle_exact(&i, None).unwrap();
        assert_eq!(g.correct, e.correct);
        assert_eq!(g.correct, 3);
    }

    #[test]
    fn greedy_on_mixed_upgrade_costs() {
        // Three instances wrong at head 0; the cheapest correct heads cost
        // 1, 2 and 3 extra units. With 3 spare units both solvers fix two.
        let i = inst(
            &[&[0, 1, 1, 1], &[0, 0, 1, 1], &[0, 0, 0, 1]],
            &[1.0, 2.0, 3.0, 4.0],
            6.0,
            OracleMode::AtMostBudget,
        );
        let g = oracle_greedy(&i).unwrap();
        let e = oracle_exact(&i, None).unwrap();
        assert!(g.correct <= e.correct);
        assert_eq!(e.correct, 2);
        assert_eq!(e.assignment, vec![1, 2, 0]);
    }

    #[test]
    fn resolution_detection() {
        assert_eq!(default_resolution(&[1.0, 2.0, 4.0], 100.0), 1.0);
        assert_eq!(default_resolution(&[2.0, 4.0, 6.0], 100.0), 2.0);
        assert!((default_resolution(&[0.5, 1.25], 100.0) - 0.25).abs() < 1e-15);
        assert!((default_resolution(&[0.1, 0.3], 100.0) - 0.1).abs() < 1e-15);
        assert!(
            (default_resolution(&[std::f64::consts::PI, 7.0], 50.0) - 50.0 / 1e5).abs() < 1e-15
        );
    }

    #[test]
    fn summary_marks_oracle() {
        let i = inst(
            &[&[0, 1], &[1, 1]],
            &[1.0, 2.0],
            3.0,
            OracleMode::AtMostBudget,
        );
        let s = oracle_exact(&i, None).unwrap().summary(2);
        assert!(s.oracle);
        assert_eq!(s.exit_proportions, vec![0.5, 0.5]);
        assert_eq!(s.consumed_budget, 3.0);
    }
}
