//! Empirical score CDFs and calibrated exit thresholds.
//!
//! Head `l` classifies an instance when the empirical CDF of its score,
//! built on the unlabeled calibration split, reaches `1 - rate_l`. Rates
//! are the cumulative allocation `sum_{j<=l} eps_j`, inflated by a
//! finite-sample correction so that no head rejects more than planned.
//! The CDF test is precomputed into one score threshold per head; the
//! direct CDF comparison is kept as [`classifies_by_cdf`] for checking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    AllocationResult, DomainError, ExitPolicy, HeadBank, Split, SIMPLEX_TOLERANCE,
};
use crate::scoring::{ScoreSpec, ScoreTable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("calibration split is empty")]
    EmptyCalibration,

    #[error("rate vector is not on the simplex (sum {sum}, min {min})")]
    NotOnSimplex { sum: f64, min: f64 },

    #[error("allocation has {allocation} heads but the bank has {bank}")]
    HeadCountMismatch { allocation: usize, bank: usize },

    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Finite-sample inflation applied to the cumulative rates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    /// Plain cumulative sums.
    None,
    /// `rate * (1 + 1/sqrt(N))`, i.e. the constant tracks the rate itself.
    #[default]
    Proportional,
    /// `rate + c/sqrt(N)` for a fixed constant `c`.
    Additive(f64),
}

impl Correction {
    fn apply(self, rate: f64, n: usize) -> f64 {
        let root_n = (n as f64).sqrt();
        let corrected = match self {
            Correction::None => rate,
            Correction::Proportional => rate * (1.0 + 1.0 / root_n),
            Correction::Additive(c) => rate + c / root_n,
        };
        corrected.min(1.0)
    }
}

impl std::str::FromStr for Correction {
    type Err = String;

    /// `none`, `proportional` or `additive:<c>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Correction::None),
            "proportional" => Ok(Correction::Proportional),
            _ => s
                .strip_prefix("additive:")
                .and_then(|c| c.parse::<f64>().ok())
                .filter(|c| c.is_finite() && *c >= 0.0)
                .map(Correction::Additive)
                .ok_or_else(|| {
                    format!(
                        "unknown correction {s:?} (expected none, proportional or additive:<c>)"
                    )
                }),
        }
    }
}

/// Sorted calibration scores of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCdf {
    head: usize,
    sorted_scores: Vec<f64>,
}

impl ScoreCdf {
    pub fn from_scores(head: usize, mut scores: Vec<f64>) -> Result<Self, CalibrationError> {
        if scores.is_empty() {
            return Err(CalibrationError::EmptyCalibration);
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self {
            head,
            sorted_scores: scores,
        })
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn len(&self) -> usize {
        self.sorted_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_scores.is_empty()
    }

    pub fn sorted_scores(&self) -> &[f64] {
        &self.sorted_scores
    }

    /// `#{s_i <= t} / N`.
    pub fn eval(&self, t: f64) -> f64 {
        let count = self.sorted_scores.partition_point(|&s| s <= t);
        count as f64 / self.sorted_scores.len() as f64
    }

    /// Smallest calibration score `t` with `eval(t) >= 1 - rate`, or `-inf`
    /// when `rate >= 1`.
    ///
    /// `score >= threshold(rate)` holds exactly when
    /// `eval(score) >= 1 - rate`: the search below uses the same
    /// floating-point comparison as [`classifies_by_cdf`].
    pub fn threshold(&self, rate: f64) -> f64 {
        if rate >= 1.0 {
            return f64::NEG_INFINITY;
        }
        let n = self.sorted_scores.len();
        let target = 1.0 - rate;
        // j/N is monotone in j, so the first j meeting the target is found
        // by bisection; j = N always qualifies because target <= 1.
        let (mut lo, mut hi) = (1usize, n);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if mid as f64 / n as f64 >= target {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        self.sorted_scores[lo - 1]
    }
}

pub fn cdf_eval(cdf: &ScoreCdf, t: f64) -> f64 {
    cdf.eval(t)
}

/// Direct form of the plug-in decision: classify iff `F(score) >= 1 - rate`.
pub fn classifies_by_cdf(cdf: &ScoreCdf, score: f64, rate: f64) -> bool {
    cdf.eval(score) >= 1.0 - rate
}

/// CDF of head `head` over every row of `bank`.
pub fn build_cdf(
    bank: &HeadBank,
    head: usize,
    split: Split,
    spec: &ScoreSpec,
) -> Result<ScoreCdf, CalibrationError> {
    if bank.num_instances() == 0 {
        return Err(CalibrationError::EmptyCalibration);
    }
    let offset = split.key_offset();
    let slice = bank.head(head);
    let mut scratch = Vec::new();
    let scores = (0..slice.num_rows())
        .map(|i| {
            crate::scoring::score_row(slice.row(i), head, offset + i as u64, spec, &mut scratch).0
        })
        .collect();
    ScoreCdf::from_scores(head, scores)
}

/// CDFs of all heads, built in parallel on the same rows.
pub fn build_cdfs(
    bank: &HeadBank,
    split: Split,
    spec: &ScoreSpec,
) -> Result<Vec<ScoreCdf>, CalibrationError> {
    if bank.num_instances() == 0 {
        return Err(CalibrationError::EmptyCalibration);
    }
    let table = ScoreTable::compute(bank, split, spec);
    table
        .scores
        .into_iter()
        .enumerate()
        .map(|(l, s)| ScoreCdf::from_scores(l, s))
        .collect()
}

fn check_simplex(eps: &[f64]) -> Result<(), CalibrationError> {
    let sum: f64 = eps.iter().sum();
    let min = eps.iter().copied().fold(f64::INFINITY, f64::min);
    if eps.is_empty()
        || !sum.is_finite()
        || (sum - 1.0).abs() > SIMPLEX_TOLERANCE
        || min < -SIMPLEX_TOLERANCE
    {
        return Err(CalibrationError::NotOnSimplex { sum, min });
    }
    Ok(())
}

/// Cumulative classification rates with the finite-sample correction for a
/// calibration set of `n` rows. The last rate is exactly 1.
pub fn sequential_rates(
    eps: &[f64],
    n: usize,
    correction: Correction,
) -> Result<Vec<f64>, CalibrationError> {
    check_simplex(eps)?;
    if n == 0 {
        return Err(CalibrationError::EmptyCalibration);
    }
    let mut acc = 0.0;
    let mut rates: Vec<f64> = eps
        .iter()
        .map(|&e| {
            acc += e.max(0.0);
            correction.apply(acc, n)
        })
        .collect();
    // Guard against rounding making the running sum dip.
    for l in 1..rates.len() {
        if rates[l] < rates[l - 1] {
            rates[l] = rates[l - 1];
        }
    }
    if let Some(last) = rates.last_mut() {
        *last = 1.0;
    }
    Ok(rates)
}

/// Builds the exit policy from the calibration split and an allocation.
pub fn build_policy(
    calib: &HeadBank,
    allocation: &AllocationResult,
    spec: &ScoreSpec,
    correction: Correction,
) -> Result<ExitPolicy, CalibrationError> {
    let cdfs = build_cdfs(calib, Split::Calib, spec)?;
    policy_from_cdfs(&cdfs, &calib.budgets(), allocation, spec, correction)
}

pub fn policy_from_cdfs(
    cdfs: &[ScoreCdf],
    budgets: &[f64],
    allocation: &AllocationResult,
    spec: &ScoreSpec,
    correction: Correction,
) -> Result<ExitPolicy, CalibrationError> {
    if allocation.epsilons.len() != cdfs.len() {
        return Err(CalibrationError::HeadCountMismatch {
            allocation: allocation.epsilons.len(),
            bank: cdfs.len(),
        });
    }
    let n = cdfs
        .first()
        .map(ScoreCdf::len)
        .ok_or(CalibrationError::EmptyCalibration)?;
    let rates = sequential_rates(&allocation.epsilons, n, correction)?;
    let thresholds = cdfs
        .iter()
        .zip(&rates)
        .map(|(cdf, &r)| cdf.threshold(r))
        .collect();
    Ok(ExitPolicy::new(
        *spec,
        rates,
        thresholds,
        n,
        budgets.to_vec(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_count(scores: &[f64], t: f64) -> f64 {
        scores.iter().filter(|&&s| s <= t).count() as f64 / scores.len() as f64
    }

    #[test]
    fn cdf_sorts_scores() {
        let cdf = ScoreCdf::from_scores(0, vec![0.9, 0.1, 0.5]).unwrap();
        assert_eq!(cdf.sorted_scores(), &[0.1, 0.5, 0.9]);
        let single = ScoreCdf::from_scores(1, vec![0.4]).unwrap();
        assert_eq!(single.sorted_scores(), &[0.4]);
        assert_eq!(
            ScoreCdf::from_scores(0, vec![]),
            Err(CalibrationError::EmptyCalibration)
        );
    }

    #[test]
    fn cdf_eval_examples() {
        let cdf = ScoreCdf::from_scores(0, vec![0.1, 0.5, 0.9]).unwrap();
        assert_eq!(cdf_eval(&cdf, 0.5), 2.0 / 3.0);
        assert_eq!(cdf_eval(&cdf, 0.0), 0.0);
        assert_eq!(cdf_eval(&cdf, 1.0), 1.0);
        assert_eq!(cdf_eval(&cdf, f64::INFINITY), 1.0);
    }

    #[test]
    fn cdf_at_sample_points_is_rank_over_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let cdf = ScoreCdf::from_scores(0, scores).unwrap();
        for (rank, &s) in cdf.sorted_scores().iter().enumerate() {
            assert_eq!(cdf.eval(s), (rank + 1) as f64 / 1000.0);
        }
    }

    #[test]
    fn cdf_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Coarse grid so that ties occur.
        let scores: Vec<f64> = (0..500)
            .map(|_| (rng.random::<f64>() * 50.0).floor() / 50.0)
            .collect();
        let cdf = ScoreCdf::from_scores(0, scores.clone()).unwrap();
        for _ in 0..1000 {
            let t = rng.random::<f64>() * 1.2 - 0.1;
            assert_eq!(cdf.eval(t), linear_count(&scores, t));
        }
    }

    #[test]
    fn sequential_rate_examples() {
        let r = sequential_rates(&[0.2, 0.3, 0.5], 100, Correction::None).unwrap();
        assert!((r[0] - 0.2).abs() < 1e-15 && (r[1] - 0.5).abs() < 1e-15);
        assert_eq!(r[2], 1.0);
        assert_eq!(
            sequential_rates(&[1.0], 10, Correction::Proportional).unwrap(),
            vec![1.0]
        );
        let r = sequential_rates(&[0.5, 0.5], 100, Correction::Proportional).unwrap();
        assert!((r[0] - 0.55).abs() < 1e-15);
        assert_eq!(r[1], 1.0);
        let r = sequential_rates(&[0.5, 0.5], 100, Correction::Additive(0.3)).unwrap();
        assert!((r[0] - 0.53).abs() < 1e-15);
        // Clamped at 1 before the last head.
        let r = sequential_rates(&[0.95, 0.0, 0.05], 4, Correction::Proportional).unwrap();
        assert_eq!(r, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn sequential_rates_reject_off_simplex() {
        assert!(matches!(
            sequential_rates(&[0.5, 0.6], 10, Correction::None),
            Err(CalibrationError::NotOnSimplex { .. })
        ));
        assert!(matches!(
            sequential_rates(&[1.5, -0.5], 10, Correction::None),
            Err(CalibrationError::NotOnSimplex { .. })
        ));
    }

    #[test]
    fn threshold_examples() {
        let cdf = ScoreCdf::from_scores(0, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(cdf.threshold(1.0), f64::NEG_INFINITY);
        assert_eq!(cdf.threshold(0.5), 0.2);
        assert_eq!(cdf.threshold(0.0), 0.4);
        assert_eq!(cdf.threshold(0.26), 0.3);
        assert_eq!(cdf.threshold(0.25), 0.3);
        assert_eq!(cdf.threshold(0.74), 0.2);
        assert_eq!(cdf.threshold(0.99), 0.1);
    }

    #[test]
    fn threshold_decision_equals_cdf_decision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let n = rng.random_range(1..300);
            let grid = if trial % 2 == 0 { 20.0 } else { 1e9 };
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random::<f64>() * grid).floor() / grid)
                .collect();
            let cdf = ScoreCdf::from_scores(0, scores).unwrap();
            for _ in 0..1000 {
                let rate = match rng.random_range(0..10) {
                    0 => 1.0,
                    1 => 0.0,
                    2 => rng.random_range(0..=n) as f64 / n as f64,
                    _ => rng.random::<f64>(),
                };
                let t = cdf.threshold(rate);
                let probe = match rng.random_range(0..3) {
                    0 => cdf.sorted_scores()[rng.random_range(0..n)],
                    _ => rng.random::<f64>() * 1.2 - 0.1,
                };
                assert_eq!(
                    probe >= t,
                    classifies_by_cdf(&cdf, probe, rate),
                    "rate {rate} probe {probe}"
                );
            }
        }
    }

    #[test]
    fn larger_rates_never_raise_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..777).map(|_| rng.random::<f64>()).collect();
        let cdf = ScoreCdf::from_scores(0, scores).unwrap();
        let mut rates: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        rates.sort_by(f64::total_cmp);
        let ts: Vec<f64> = rates.iter().map(|&r| cdf.threshold(r)).collect();
        assert!(ts.windows(2).all(|w| w[1] <= w[0]));
    }
}
