//! Deterministic synthetic multi-head datasets.
//!
//! Each instance gets a uniform label and a latent difficulty `d ~ U[0,1]`.
//! Head `l` sees `d` itself, or with probability `head_noise` an
//! independent uniform draw, and is correct iff that difficulty is at most
//! its target accuracy, so head `l` is correct with probability exactly
//! `head_accuracies[l]`. The probability row is a softmax over
//! `sharpness * (1 - d_l) * onehot(prediction) + N(0, logit_noise^2)`, which
//! makes easy instances confident at every head.
//!
//! Draws are keyed by `(seed, split, instance, head)` through ChaCha
//! stream/word positioning, so output does not depend on thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Dataset, DomainError, HeadBank, HeadSlice, Split, SplitData};
use crate::scoring::head_predict;

/// Words reserved per instance in each stream.
const WORDS_PER_INSTANCE: u128 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub n_train: usize,
    pub n_calib: usize,
    pub n_test: usize,
}

/// Generator settings. Omitted JSON fields take their default values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub num_heads: usize,
    pub head_accuracies: Vec<f64>,
    pub head_budgets: Vec<f64>,
    pub confidence_sharpness: f64,
    #[serde(default = "default_logit_noise")]
    pub logit_noise: f64,
    #[serde(default = "default_head_noise")]
    pub head_noise: f64,
    pub sizes: SplitSizes,
}

fn default_logit_noise() -> f64 {
    0.5
}

fn default_head_noise() -> f64 {
    0.2
}

impl Default for SynthSpec {
    /// Eight heads, ten classes, 1000 calibration and 5000 test rows.
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 10,
            num_heads: 8,
            head_accuracies: vec![0.45, 0.55, 0.62, 0.67, 0.71, 0.74, 0.73, 0.77],
            head_budgets: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0],
            confidence_sharpness: 8.0,
            logit_noise: default_logit_noise(),
            head_noise: default_head_noise(),
            sizes: SplitSizes {
                n_train: 2000,
                n_calib: 1000,
                n_test: 5000,
            },
        }
    }
}

impl SynthSpec {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidSpec(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.num_heads < 2 {
            return bad(format!("num_heads {} < 2", self.num_heads));
        }
        if self.head_accuracies.len() != self.num_heads || self.head_budgets.len() != self.num_heads
        {
            return bad(format!(
                "{} accuracies and {} budgets for {} heads",
                self.head_accuracies.len(),
                self.head_budgets.len(),
                self.num_heads
            ));
        }
        if self
            .head_accuracies
            .iter()
            .any(|a| !(*a > 0.0 && *a <= 1.0))
        {
            return bad("accuracies must lie in (0, 1]".into());
        }
        if self
            .head_budgets
            .iter()
            .any(|b| !(b.is_finite() && *b > 0.0))
            || self.head_budgets.windows(2).any(|w| w[1] <= w[0])
        {
            return bad("budgets must be positive and strictly increasing".into());
        }
        if !(self.confidence_sharpness.is_finite() && self.confidence_sharpness > 0.0) {
            return bad("confidence_sharpness must be positive".into());
        }
        if !(self.logit_noise.is_finite() && self.logit_noise >= 0.0) {
            return bad("logit_noise must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.head_noise) {
            return bad("head_noise must lie in [0, 1]".into());
        }
        if self.sizes.n_calib == 0 {
            return bad("n_calib must be positive".into());
        }
        Ok(())
    }
}

fn stream(spec: &SynthSpec, split: Split, slot: u64, instance: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.tag() << 32 | slot);
    rng.set_word_pos(instance as u128 * WORDS_PER_INSTANCE);
    rng
}

/// Label and all head rows of one instance.
fn instance_rows(spec: &SynthSpec, split: Split, i: usize) -> (usize, Vec<Vec<f64>>) {
    let k = spec.num_classes;
    let mut base = stream(spec, split, 0, i);
    let label = base.random_range(0..k);
    let difficulty: f64 = base.random();

    let rows = (0..spec.num_heads)
        .map(|l| {
            let mut rng = stream(spec, split, l as u64 + 1, i);
            let own: f64 = rng.random();
            let d = if rng.random::<f64>() < spec.head_noise {
                own
            } else {
                difficulty
            };
            let predicted = if d < spec.head_accuracies[l] {
                label
            } else {
                let w = rng.random_range(0..k - 1);
                if w >= label {
                    w + 1
                } else {
                    w
                }
            };
            let mut logits: Vec<f64> = (0..k)
                .map(|c| {
                    let noise: f64 = rng.sample(StandardNormal);
                    let signal = if c == predicted {
                        spec.confidence_sharpness * (1.0 - d)
                    } else {
                        0.0
                    };
                    signal + spec.logit_noise * noise
                })
                .collect();
            // The intended class must stay the argmax.
            let top = head_predict(&logits);
            logits.swap(top, predicted);
            softmax(&logits)
        })
        .collect();
    (label, rows)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Bank and labels for `n` instances of one split.
pub fn generate_split(
    spec: &SynthSpec,
    split: Split,
    n: usize,
) -> Result<(HeadBank, Vec<usize>), SynthError> {
    spec.validate()?;
    if n == 0 {
        return Err(SynthError::InvalidSpec(format!(
            "{} split is empty",
            split.name()
        )));
    }
    let per_instance: Vec<(usize, Vec<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| instance_rows(spec, split, i))
        .collect();
    let labels = per_instance.iter().map(|(y, _)| *y).collect();
    let heads = (0..spec.num_heads)
        .map(|l| {
            let probs = per_instance
                .iter()
                .flat_map(|(_, rows)| rows[l].iter().copied())
                .collect();
            HeadSlice::new(probs, spec.num_classes, spec.head_budgets[l], None)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((HeadBank::new(heads)?, labels))
}

/// Labeled train and test splits plus an unlabeled calibration split.
/// Empty train or test sizes leave that split out.
pub fn generate(spec: &SynthSpec) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let labeled = |split: Split, n: usize| -> Result<Option<SplitData>, SynthError> {
        if n == 0 {
            return Ok(None);
        }
        let (bank, labels) = generate_split(spec, split, n)?;
        Ok(Some(SplitData::new(bank, Some(labels))))
    };
    let (calib_bank, _) = generate_split(spec, Split::Calib, spec.sizes.n_calib)?;
    Ok(Dataset {
        train: labeled(Split::Train, spec.sizes.n_train)?,
        calib: SplitData::new(calib_bank, None),
        test: labeled(Split::Test, spec.sizes.n_test)?,
    })
}
