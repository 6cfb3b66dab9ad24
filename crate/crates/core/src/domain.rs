//! Core data types shared by every stage of the pipeline.
//!
//! A [`HeadBank`] is the model surrogate: one probability matrix per exit
//! head together with the head's per-instance cost. Everything downstream
//! (allocation, calibration, inference, oracle) reads banks and never
//! mutates them. Result records ([`AllocationResult`], [`ExitPolicy`],
//! [`BatchResult`]) are plain data that serialize to the JSON documents
//! exchanged between CLI invocations.
//!
//! Head and class indices are 0-based in memory. Files written for humans
//! (CSV, CLI tables) use 1-based indices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{ScoreKind, ScoreSpec};

/// Maximum deviation of a probability row sum from 1 accepted at load time.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Rows whose sum is off by more than this are rescaled after validation.
/// Kept far above rounding noise so rescaling is idempotent.
const RENORMALIZE_THRESHOLD: f64 = 1e-12;

/// Simplex tolerance for allocation and exit-proportion vectors.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("a head bank needs at least 2 heads, found {found}")]
    TooFewHeads { found: usize },

    #[error("head {head} has shape {found_rows}x{found_classes}, expected {expected_rows}x{expected_classes}")]
    ShapeMismatch {
        head: usize,
        expected_rows: usize,
        expected_classes: usize,
        found_rows: usize,
        found_classes: usize,
    },

    #[error("head budgets must strictly increase: head {head} costs {current} after {previous}")]
    NonIncreasingBudgets {
        head: usize,
        previous: f64,
        current: f64,
    },

    #[error("head {head} has invalid budget {value} (must be finite and > 0)")]
    InvalidBudget { head: usize, value: f64 },

    #[error("head {head} has risk {value} outside [0, 1]")]
    InvalidRisk { head: usize, value: f64 },

    #[error("head {head} row {row} has invalid probability {value} at class {class}")]
    InvalidProbability {
        head: usize,
        row: usize,
        class: usize,
        value: f64,
    },

    #[error("head {head} row {row} sums to {sum}, not 1")]
    RowNotNormalized { head: usize, row: usize, sum: f64 },

    #[error("a head needs at least 2 classes and 1 row, found {rows} rows of {classes} classes")]
    EmptyHead { rows: usize, classes: usize },

    #[error("invalid budget spec: total {total_budget} GFlops for batch of {batch_size}")]
    InvalidBudgetSpec {
        total_budget: f64,
        batch_size: usize,
    },

    #[error(
        "mean budget {mean_budget} GFlops is below the cheapest head ({min_head_budget} GFlops)"
    )]
    InfeasibleBudget {
        mean_budget: f64,
        min_head_budget: f64,
    },

    #[error("invalid exit policy: {0}")]
    InvalidPolicy(String),
}

/// Which part of a dataset a bank came from. Each split draws score jitter
/// from its own instance-key range so calibration and test noise never
/// coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Calib,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Calib, Split::Test];

    /// Offset added to row indices to form jitter keys.
    pub fn key_offset(self) -> u64 {
        match self {
            Split::Calib => 0,
            Split::Test => 1 << 40,
            Split::Train => 2 << 40,
        }
    }

    pub fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Calib => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Calib => "calib",
            Split::Test => "test",
        }
    }
}

/// Probability estimates of one exit head over a set of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSlice {
    probs: Vec<f64>,
    num_rows: usize,
    num_classes: usize,
    budget_gflops: f64,
    risk: Option<f64>,
}

impl HeadSlice {
    /// `probs` is row-major, `num_rows x num_classes`. Row normalization is
    /// checked when the slice joins a [`HeadBank`].
    pub fn new(
        probs: Vec<f64>,
        num_classes: usize,
        budget_gflops: f64,
        risk: Option<f64>,
    ) -> Result<Self, DomainError> {
        if num_classes < 2 || probs.is_empty() || !probs.len().is_multiple_of(num_classes) {
            return Err(DomainError::EmptyHead {
                rows: probs.len().checked_div(num_classes).unwrap_or(0),
                classes: num_classes,
            });
        }
        if !(budget_gflops.is_finite() && budget_gflops > 0.0) {
            return Err(DomainError::InvalidBudget {
                head: 0,
                value: budget_gflops,
            });
        }
        if let Some(r) = risk {
            if !(0.0..=1.0).contains(&r) {
                return Err(DomainError::InvalidRisk { head: 0, value: r });
            }
        }
        Ok(Self {
            num_rows: probs.len() / num_classes,
            probs,
            num_classes,
            budget_gflops,
            risk,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn budget_gflops(&self) -> f64 {
        self.budget_gflops
    }

    pub fn risk(&self) -> Option<f64> {
        self.risk
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.num_classes;
        &self.probs[i * k..(i + 1) * k]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.probs.chunks_exact(self.num_classes)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn with_risk(mut self, risk: Option<f64>) -> Self {
        self.risk = risk;
        self
    }
}

/// Validated multi-head probability bank for one split.
///
/// Invariants: at least two heads, identical shapes, strictly increasing
/// per-instance costs, finite non-negative rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBank {
    heads: Vec<HeadSlice>,
    num_classes: usize,
    num_instances: usize,
}

impl HeadBank {
    /// Validates the slices and rescales rows whose sum is off by more than
    /// rounding noise (but within [`ROW_SUM_TOLERANCE`]).
    pub fn new(heads: Vec<HeadSlice>) -> Result<Self, DomainError> {
        validate_head_bank(heads)
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_instances(&self) -> usize {
        self.num_instances
    }

    pub fn heads(&self) -> &[HeadSlice] {
        &self.heads
    }

    pub fn head(&self, l: usize) -> &HeadSlice {
        &self.heads[l]
    }

    pub fn budgets(&self) -> Vec<f64> {
        self.heads.iter().map(HeadSlice::budget_gflops).collect()
    }

    /// Risks of all heads, or `None` if any head lacks one.
    pub fn risks(&self) -> Option<Vec<f64>> {
        self.heads.iter().map(HeadSlice::risk).collect()
    }

    pub fn min_budget(&self) -> f64 {
        self.heads[0].budget_gflops
    }

    pub fn max_budget(&self) -> f64 {
        self.heads[self.heads.len() - 1].budget_gflops
    }

    /// Returns a copy with the given per-head risks attached.
    pub fn with_risks(&self, risks: &[f64]) -> Result<Self, DomainError> {
        if risks.len() != self.heads.len() {
            return Err(DomainError::InvalidPolicy(format!(
                "{} risks for {} heads",
                risks.len(),
                self.heads.len()
            )));
        }
        for (head, &r) in risks.iter().enumerate() {
            if !(0.0..=1.0).contains(&r) {
                return Err(DomainError::InvalidRisk { head, value: r });
            }
        }
        Ok(Self {
            heads: self
                .heads
                .iter()
                .zip(risks)
                .map(|(h, &r)| h.clone().with_risk(Some(r)))
                .collect(),
            num_classes: self.num_classes,
            num_instances: self.num_instances,
        })
    }

    /// Same heads restricted to a subset of rows.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, DomainError> {
        let heads = self
            .heads
            .iter()
            .map(|h| {
                let probs = rows
                    .iter()
                    .flat_map(|&i| h.row(i).iter().copied())
                    .collect();
                HeadSlice::new(probs, self.num_classes, h.budget_gflops, h.risk)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(heads)
    }
}

/// Checks every [`HeadBank`] invariant, reporting the first violation.
pub fn validate_head_bank(mut heads: Vec<HeadSlice>) -> Result<HeadBank, DomainError> {
    if heads.len() < 2 {
        return Err(DomainError::TooFewHeads { found: heads.len() });
    }
    let num_classes = heads[0].num_classes;
    let num_instances = heads[0].num_rows;

    for (l, h) in heads.iter().enumerate() {
        if h.num_classes != num_classes || h.num_rows != num_instances {
            return Err(DomainError::ShapeMismatch {
                head: l,
                expected_rows: num_instances,
                expected_classes: num_classes,
                found_rows: h.num_rows,
                found_classes: h.num_classes,
            });
        }
        if !(h.budget_gflops.is_finite() && h.budget_gflops > 0.0) {
            return Err(DomainError::InvalidBudget {
                head: l,
                value: h.budget_gflops,
            });
        }
        if let Some(r) = h.risk {
            if !(0.0..=1.0).contains(&r) {
                return Err(DomainError::InvalidRisk { head: l, value: r });
            }
        }
        if l > 0 && h.budget_gflops <= heads[l - 1].budget_gflops {
            return Err(DomainError::NonIncreasingBudgets {
                head: l,
                previous: heads[l - 1].budget_gflops,
                current: h.budget_gflops,
            });
        }
    }

    for (l, h) in heads.iter().enumerate() {
        for (i, row) in h.rows().enumerate() {
            if let Some((k, &p)) = row
                .iter()
                .enumerate()
                .find(|(_, p)| !(p.is_finite() && **p >= 0.0))
            {
                return Err(DomainError::InvalidProbability {
                    head: l,
                    row: i,
                    class: k,
                    value: p,
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(DomainError::RowNotNormalized {
                    head: l,
                    row: i,
                    sum,
                });
            }
        }
    }

    for h in &mut heads {
        for row in h.probs.chunks_exact_mut(num_classes) {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > RENORMALIZE_THRESHOLD {
                row.iter_mut().for_each(|p| *p /= sum);
            }
        }
    }

    Ok(HeadBank {
        heads,
        num_classes,
        num_instances,
    })
}

/// One split's bank with its instance ids and optional 0-based labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub bank: HeadBank,
    pub instance_ids: Vec<u64>,
    pub labels: Option<Vec<usize>>,
}

impl SplitData {
    /// Split whose instance ids are the row indices.
    pub fn new(bank: HeadBank, labels: Option<Vec<usize>>) -> Self {
        let instance_ids = (0..bank.num_instances() as u64).collect();
        Self {
            bank,
            instance_ids,
            labels,
        }
    }
}

/// Train, calibration and test splits over the same heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Option<SplitData>,
    pub calib: SplitData,
    pub test: Option<SplitData>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Option<&SplitData> {
        match split {
            Split::Train => self.train.as_ref(),
            Split::Calib => Some(&self.calib),
            Split::Test => self.test.as_ref(),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.calib.bank.num_heads()
    }

    pub fn num_classes(&self) -> usize {
        self.calib.bank.num_classes()
    }

    pub fn budgets(&self) -> Vec<f64> {
        self.calib.bank.budgets()
    }
}

/// Total budget `B` for a batch of `T` instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BudgetSpecRepr", into = "BudgetSpecRepr")]
pub struct BudgetSpec {
    total_budget: f64,
    batch_size: usize,
}

#[derive(Serialize, Deserialize)]
struct BudgetSpecRepr {
    total_budget: f64,
    batch_size: usize,
    mean_budget: f64,
}

impl From<BudgetSpec> for BudgetSpecRepr {
    fn from(b: BudgetSpec) -> Self {
        Self {
            total_budget: b.total_budget,
            batch_size: b.batch_size,
            mean_budget: b.mean_budget(),
        }
    }
}

impl TryFrom<BudgetSpecRepr> for BudgetSpec {
    type Error = DomainError;

    fn try_from(r: BudgetSpecRepr) -> Result<Self, Self::Error> {
        BudgetSpec::new(r.total_budget, r.batch_size)
    }
}

impl BudgetSpec {
    pub fn new(total_budget: f64, batch_size: usize) -> Result<Self, DomainError> {
        if !(total_budget.is_finite() && total_budget > 0.0) || batch_size == 0 {
            return Err(DomainError::InvalidBudgetSpec {
                total_budget,
                batch_size,
            });
        }
        Ok(Self {
            total_budget,
            batch_size,
        })
    }

    pub fn total_budget(&self) -> f64 {
        self.total_budget
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Average budget per instance, `B / T`.
    pub fn mean_budget(&self) -> f64 {
        self.total_budget / self.batch_size as f64
    }

    pub fn check_feasible(&self, bank: &HeadBank) -> Result<(), DomainError> {
        let min = bank.min_budget();
        if self.mean_budget() < min * (1.0 - SIMPLEX_TOLERANCE) {
            return Err(DomainError::InfeasibleBudget {
                mean_budget: self.mean_budget(),
                min_head_budget: min,
            });
        }
        Ok(())
    }
}

/// Output of the exponential-weights allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    /// Classification rate per head, on the simplex.
    pub epsilons: Vec<f64>,
    /// Budget multiplier; `+inf` in the degenerate case where the mean
    /// budget equals the cheapest head's cost.
    #[serde(with = "nonfinite")]
    pub multiplier: f64,
    pub expected_budget: f64,
    pub kl_to_prior: f64,
    /// Whether the budget constraint is active (`multiplier > 0`).
    pub saturated: bool,
    #[serde(default)]
    pub degenerate: bool,
}

/// Calibrated per-head rates and score thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExitPolicyRepr", into = "ExitPolicyRepr")]
pub struct ExitPolicy {
    score: ScoreSpec,
    seq_rates: Vec<f64>,
    thresholds: Vec<f64>,
    calibration_size: usize,
    head_budgets: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ExitPolicyRepr {
    score_kind: ScoreKind,
    jitter_u: f64,
    seed: u64,
    seq_rates: Vec<f64>,
    #[serde(with = "nonfinite::vec")]
    thresholds: Vec<f64>,
    calibration_size: usize,
    head_budgets: Vec<f64>,
}

impl From<ExitPolicy> for ExitPolicyRepr {
    fn from(p: ExitPolicy) -> Self {
        Self {
            score_kind: p.score.kind,
            jitter_u: p.score.jitter_u,
            seed: p.score.seed,
            seq_rates: p.seq_rates,
            thresholds: p.thresholds,
            calibration_size: p.calibration_size,
            head_budgets: p.head_budgets,
        }
    }
}

impl TryFrom<ExitPolicyRepr> for ExitPolicy {
    type Error = DomainError;

    fn try_from(r: ExitPolicyRepr) -> Result<Self, Self::Error> {
        ExitPolicy::new(
            ScoreSpec {
                kind: r.score_kind,
                jitter_u: r.jitter_u,
                seed: r.seed,
            },
            r.seq_rates,
            r.thresholds,
            r.calibration_size,
            r.head_budgets,
        )
    }
}

impl ExitPolicy {
    pub fn new(
        score: ScoreSpec,
        seq_rates: Vec<f64>,
        thresholds: Vec<f64>,
        calibration_size: usize,
        head_budgets: Vec<f64>,
    ) -> Result<Self, DomainError> {
        let bad = |msg: String| Err(DomainError::InvalidPolicy(msg));
        let m = seq_rates.len();
        if m == 0 || thresholds.len() != m || head_budgets.len() != m {
            return bad(format!(
                "{} rates, {} thresholds, {} budgets",
                m,
                thresholds.len(),
                head_budgets.len()
            ));
        }
        if !(score.jitter_u.is_finite() && score.jitter_u >= 0.0) {
            return bad(format!("jitter {} must be >= 0", score.jitter_u));
        }
        if calibration_size == 0 {
            return bad("calibration size must be positive".into());
        }
        if seq_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("sequential rates must lie in [0, 1]".into());
        }
        if seq_rates.windows(2).any(|w| w[1] < w[0]) {
            return bad("sequential rates must be non-decreasing".into());
        }
        if seq_rates[m - 1] != 1.0 {
            return bad("the final head must classify everything".into());
        }
        for (l, (&r, &t)) in seq_rates.iter().zip(&thresholds).enumerate() {
            if (r == 1.0) != (t == f64::NEG_INFINITY) || t.is_nan() || t == f64::INFINITY {
                return bad(format!("head {} has threshold {} for rate {}", l + 1, t, r));
            }
        }
        Ok(Self {
            score,
            seq_rates,
            thresholds,
            calibration_size,
            head_budgets,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.seq_rates.len()
    }

    pub fn score_spec(&self) -> ScoreSpec {
        self.score
    }

    pub fn seq_rates(&self) -> &[f64] {
        &self.seq_rates
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn calibration_size(&self) -> usize {
        self.calibration_size
    }

    pub fn head_budgets(&self) -> &[f64] {
        &self.head_budgets
    }
}

/// Outcome of routing a batch through the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    /// 0-based exit head per instance.
    pub exits: Vec<usize>,
    /// 0-based predicted class per instance.
    pub predictions: Vec<usize>,
    pub per_instance_cost: Vec<f64>,
    pub consumed_budget: f64,
    pub accuracy: Option<f64>,
    /// Fraction of the batch classified by each head.
    pub exit_proportions: Vec<f64>,
    pub correct: Option<Vec<bool>>,
}

impl BatchResult {
    /// Aggregates per-instance decisions. Sums run in index order so the
    /// result does not depend on how the decisions were computed.
    pub fn from_assignment(
        exits: Vec<usize>,
        predictions: Vec<usize>,
        budgets: &[f64],
        labels: Option<&[usize]>,
    ) -> Self {
        let t = exits.len();
        let per_instance_cost: Vec<f64> = exits.iter().map(|&l| budgets[l]).collect();
        let consumed_budget = per_instance_cost.iter().sum();
        let mut counts = vec![0usize; budgets.len()];
        for &l in &exits {
            counts[l] += 1;
        }
        let exit_proportions = counts
            .iter()
            .map(|&c| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect();
        let correct: Option<Vec<bool>> =
            labels.map(|ys| predictions.iter().zip(ys).map(|(p, y)| p == y).collect());
        let accuracy = correct.as_ref().map(|c| {
            if t == 0 {
                0.0
            } else {
                c.iter().filter(|&&b| b).count() as f64 / t as f64
            }
        });
        Self {
            exits,
            predictions,
            per_instance_cost,
            consumed_budget,
            accuracy,
            exit_proportions,
            correct,
        }
    }

    pub fn num_instances(&self) -> usize {
        self.exits.len()
    }

    pub fn summary(&self, oracle: bool) -> BatchSummary {
        BatchSummary {
            oracle,
            num_instances: self.exits.len(),
            consumed_budget: self.consumed_budget,
            accuracy: self.accuracy,
            exit_proportions: self.exit_proportions.clone(),
        }
    }
}

/// JSON summary shared by policy runs and oracle runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub oracle: bool,
    pub num_instances: usize,
    pub consumed_budget: f64,
    pub accuracy: Option<f64>,
    pub exit_proportions: Vec<f64>,
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`,
/// which plain JSON numbers cannot carry.
pub(crate) mod nonfinite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(x: f64) -> Repr {
        if x.is_finite() {
            Repr::Num(x)
        } else if x.is_nan() {
            Repr::Text("nan".into())
        } else if x > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(x) => Ok(x),
            Repr::Text(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("invalid float {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let reprs: Vec<Repr> = xs.iter().map(|&x| to_repr(x)).collect();
            reprs.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?
                .into_iter()
                .map(from_repr::<D::Error>)
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(rows: &[&[f64]], budget: f64) -> HeadSlice {
        let k = rows[0].len();
        HeadSlice::new(rows.concat(), k, budget, None).unwrap()
    }

    #[test]
    fn well_formed_bank_is_accepted() {
        let bank = HeadBank::new(vec![
            slice(&[&[0.3, 0.7], &[1.0, 0.0]], 1.0),
            slice(&[&[0.5, 0.5], &[0.2, 0.8]], 2.0),
        ])
        .unwrap();
        assert_eq!(bank.num_heads(), 2);
        assert_eq!(bank.num_classes(), 2);
        assert_eq!(bank.num_instances(), 2);
        assert_eq!(bank.budgets(), vec![1.0, 2.0]);
        assert_eq!(bank.risks(), None);
    }

    #[test]
    fn decreasing_budgets_are_rejected() {
        let err = HeadBank::new(vec![slice(&[&[0.5, 0.5]], 2.0), slice(&[&[0.5, 0.5]], 1.0)])
            .unwrap_err();
        assert!(matches!(
            err,
            DomainError::NonIncreasingBudgets { head: 1, .. }
        ));
    }

    #[test]
    fn equal_budgets_are_rejected() {
        let err = HeadBank::new(vec![slice(&[&[0.5, 0.5]], 1.0), slice(&[&[0.5, 0.5]], 1.0)])
            .unwrap_err();
        assert!(matches!(err, DomainError::NonIncreasingBudgets { .. }));
    }

    #[test]
    fn unnormalized_row_is_rejected() {
        let err = HeadBank::new(vec![slice(&[&[0.5, 0.6]], 1.0), slice(&[&[0.5, 0.5]], 2.0)])
            .unwrap_err();
        match err {
            DomainError::RowNotNormalized { head, row, sum } => {
                assert_eq!((head, row), (0, 0));
                assert!((sum - 1.1).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let err = HeadBank::new(vec![
            slice(&[&[0.5, 0.5], &[0.5, 0.5]], 1.0),
            slice(&[&[0.5, 0.5]], 2.0),
        ])
        .unwrap_err();
        assert!(matches!(err, DomainError::ShapeMismatch { head: 1, .. }));
        let err = HeadBank::new(vec![
            slice(&[&[0.5, 0.5]], 1.0),
            slice(&[&[0.2, 0.3, 0.5]], 2.0),
        ])
        .unwrap_err();
        assert!(matches!(err, DomainError::ShapeMismatch { head: 1, .. }));
    }

    #[test]
    fn single_head_is_rejected() {
        let err = HeadBank::new(vec![slice(&[&[0.5, 0.5]], 1.0)]).unwrap_err();
        assert_eq!(err, DomainError::TooFewHeads { found: 1 });
    }

    #[test]
    fn negative_and_nan_entries_are_rejected() {
        let err = HeadBank::new(vec![
            slice(&[&[1.5, -0.5]], 1.0),
            slice(&[&[0.5, 0.5]], 2.0),
        ])
        .unwrap_err();
        assert!(matches!(
            err,
            DomainError::InvalidProbability { class: 1, .. }
        ));
        let err = HeadBank::new(vec![
            slice(&[&[f64::NAN, 1.0]], 1.0),
            slice(&[&[0.5, 0.5]], 2.0),
        ])
        .unwrap_err();
        assert!(matches!(
            err,
            DomainError::InvalidProbability { class: 0, .. }
        ));
    }

    #[test]
    fn slices_reject_bad_budget_and_risk() {
        assert!(matches!(
            HeadSlice::new(vec![0.5, 0.5], 2, 0.0, None),
            Err(DomainError::InvalidBudget { .. })
        ));
        assert!(matches!(
            HeadSlice::new(vec![0.5, 0.5], 2, 1.0, Some(1.2)),
            Err(DomainError::InvalidRisk { .. })
        ));
    }

    #[test]
    fn rows_within_tolerance_are_renormalized() {
        let bank = HeadBank::new(vec![
            slice(&[&[0.3, 0.7 + 5e-7]], 1.0),
            slice(&[&[0.5, 0.5]], 2.0),
        ])
        .unwrap();
        let sum: f64 = bank.head(0).row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        // Validating again leaves the rows bit-identical.
        let again = HeadBank::new(bank.heads().to_vec()).unwrap();
        assert_eq!(again, bank);
    }

    #[test]
    fn budget_spec_mean_and_feasibility() {
        let b = BudgetSpec::new(300.0, 100).unwrap();
        assert_eq!(b.mean_budget(), 3.0);
        let bank =
            HeadBank::new(vec![slice(&[&[0.5, 0.5]], 4.0), slice(&[&[0.5, 0.5]], 5.0)]).unwrap();
        assert!(matches!(
            b.check_feasible(&bank),
            Err(DomainError::InfeasibleBudget { .. })
        ));
        assert!(BudgetSpec::new(0.0, 10).is_err());
        assert!(BudgetSpec::new(10.0, 0).is_err());
    }

    #[test]
    fn policy_json_keeps_negative_infinity() {
        let policy = ExitPolicy::new(
            ScoreSpec::default(),
            vec![0.4, 1.0],
            vec![0.25, f64::NEG_INFINITY],
            10,
            vec![1.0, 2.0],
        )
        .unwrap();
        let json = serde_json::to_string(&policy).unwrap();
        assert!(json.contains("\"-inf\""));
        let back: ExitPolicy = serde_json::from_str(&json).unwrap();
        assert_eq!(back, policy);
    }

    #[test]
    fn policy_invariants_are_enforced() {
        let s = ScoreSpec::default();
        let inf = f64::NEG_INFINITY;
        assert!(ExitPolicy::new(s, vec![0.5, 0.9], vec![0.1, 0.2], 5, vec![1.0, 2.0]).is_err());
        assert!(ExitPolicy::new(
            s,
            vec![0.6, 0.5, 1.0],
            vec![0.1, 0.2, inf],
            5,
            vec![1.0, 2.0, 3.0]
        )
        .is_err());
        assert!(ExitPolicy::new(s, vec![1.0, 1.0], vec![0.1, inf], 5, vec![1.0, 2.0]).is_err());
        assert!(ExitPolicy::new(s, vec![1.0, 1.0], vec![inf, inf], 5, vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn batch_aggregation() {
        let r = BatchResult::from_assignment(
            vec![0, 1, 1, 0],
            vec![2, 0, 1, 1],
            &[1.0, 3.0],
            Some(&[2, 0, 0, 1]),
        );
        assert_eq!(r.consumed_budget, 8.0);
        assert_eq!(r.exit_proportions, vec![0.5, 0.5]);
        assert_eq!(r.accuracy, Some(0.75));
        let s = r.summary(false);
        assert_eq!(s.num_instances, 4);
        let unlabeled = BatchResult::from_assignment(vec![0], vec![0], &[1.0, 2.0], None);
        assert_eq!(unlabeled.accuracy, None);
    }
}
