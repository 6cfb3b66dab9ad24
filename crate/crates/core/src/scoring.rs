//! Randomized confidence scores and head predictions.
//!
//! Every probability row is first perturbed by `u_k ~ U[0, jitter_u)` per
//! class so that scores have an atomless distribution; the prediction is
//! the argmax of the perturbed row and the score is one of three
//! confidence measures computed on it. Jitter is drawn from a counter-based
//! ChaCha stream keyed by `(seed, head, instance, class)`, so a row's
//! noise never depends on evaluation order or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{HeadBank, Split};

/// Default jitter amplitude.
pub const DEFAULT_JITTER: f64 = 1e-5;

/// Floor applied to probabilities before taking logs.
const ENTROPY_FLOOR: f64 = 1e-12;

/// Keeps jitter streams apart from the synthetic generator's streams.
const JITTER_STREAM_DOMAIN: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Largest jittered probability.
    MaxProb,
    /// Gap between the two largest jittered probabilities.
    #[default]
    BreakingTies,
    /// `sum q log q` over the jittered row.
    NegEntropy,
}

impl std::str::FromStr for ScoreKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "max_prob" => Ok(Self::MaxProb),
            "breaking_ties" => Ok(Self::BreakingTies),
            "neg_entropy" => Ok(Self::NegEntropy),
            _ => Err(format!(
                "unknown score kind {s:?} (expected max_prob, breaking_ties or neg_entropy)"
            )),
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MaxProb => "max_prob",
            Self::BreakingTies => "breaking_ties",
            Self::NegEntropy => "neg_entropy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub kind: ScoreKind,
    pub jitter_u: f64,
    pub seed: u64,
}

impl Default for ScoreSpec {
    fn default() -> Self {
        Self {
            kind: ScoreKind::BreakingTies,
            jitter_u: DEFAULT_JITTER,
            seed: 0,
        }
    }
}

impl ScoreSpec {
    pub fn new(kind: ScoreKind, jitter_u: f64, seed: u64) -> Self {
        Self {
            kind,
            jitter_u,
            seed,
        }
    }

    /// Same spec with jitter disabled.
    pub fn unjittered(self) -> Self {
        Self {
            jitter_u: 0.0,
            ..self
        }
    }
}

/// Writes `probs + u` into `out`, where `u_k` is keyed by
/// `(spec.seed, head, instance, k)`.
pub fn jitter_row_into(
    probs: &[f64],
    head: usize,
    instance: u64,
    spec: &ScoreSpec,
    out: &mut [f64],
) {
    out.copy_from_slice(probs);
    if spec.jitter_u == 0.0 {
        return;
    }
    let k = probs.len() as u128;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(JITTER_STREAM_DOMAIN | head as u64);
    // Two 32-bit words per f64 draw.
    rng.set_word_pos(instance as u128 * k * 2);
    for p in out.iter_mut() {
        *p += rng.random::<f64>() * spec.jitter_u;
    }
}

pub fn jitter_row(probs: &[f64], head: usize, instance: u64, spec: &ScoreSpec) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    jitter_row_into(probs, head, instance, spec, &mut out);
    out
}

/// Index of the largest entry; the lowest index wins exact ties.
pub fn head_predict(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = k;
        }
    }
    best
}

/// Confidence score of a (jittered) row. Higher means more confident for
/// every kind.
pub fn head_score(row: &[f64], kind: ScoreKind) -> f64 {
    match kind {
        ScoreKind::MaxProb => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ScoreKind::BreakingTies => {
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &p in row {
                if p > first {
                    second = first;
                    first = p;
                } else if p > second {
                    second = p;
                }
            }
            first - second
        }
        ScoreKind::NegEntropy => row
            .iter()
            .map(|&p| {
                let q = p.max(ENTROPY_FLOOR);
                q * q.ln()
            })
            .sum(),
    }
}

/// Jittered score and prediction for one row.
pub fn score_row(
    probs: &[f64],
    head: usize,
    instance: u64,
    spec: &ScoreSpec,
    scratch: &mut Vec<f64>,
) -> (f64, usize) {
    scratch.resize(probs.len(), 0.0);
    jitter_row_into(probs, head, instance, spec, scratch);
    (head_score(scratch, spec.kind), head_predict(scratch))
}

/// Scores and predictions of every head on every row of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    /// `scores[l][i]`
    pub scores: Vec<Vec<f64>>,
    /// `predictions[l][i]`, 0-based.
    pub predictions: Vec<Vec<usize>>,
}

impl ScoreTable {
    pub fn compute(bank: &HeadBank, split: Split, spec: &ScoreSpec) -> Self {
        use rayon::prelude::*;

        let offset = split.key_offset();
        let (scores, predictions) = bank
            .heads()
            .par_iter()
            .enumerate()
            .map(|(l, head)| {
                let pairs: Vec<(f64, usize)> = (0..head.num_rows())
                    .into_par_iter()
                    .map_init(Vec::new, |scratch, i| {
                        score_row(head.row(i), l, offset + i as u64, spec, scratch)
                    })
                    .collect();
                pairs.into_iter().unzip::<f64, usize, Vec<_>, Vec<_>>()
            })
            .collect::<Vec<_>>()
            .into_iter()
            .unzip();
        Self {
            scores,
            predictions,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.scores.len()
    }
}
