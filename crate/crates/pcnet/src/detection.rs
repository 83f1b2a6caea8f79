//! NLL anomaly scoring, threshold calibration, and detection metrics.
//!
//! The anomaly score of a hidden state is the exact negative log-likelihood
//! of its projection: S(h) = -log C_root(f_φ(h)). Hallucinated is the
//! positive class throughout, predicted when nll ≥ τ.

use crate::bottleneck::{Bottleneck, BottleneckError};
use crate::circuit::{CircuitError, CircuitGraph};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Factual,
    Hallucinated,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Factual => 0,
            Label::Hallucinated => 1,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(Label::Factual),
            1 => Ok(Label::Hallucinated),
            other => Err(serde::de::Error::custom(format!(
                "label must be 0 (factual) or 1 (hallucinated), got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub nll: f64,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    pub f1_at_tau: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum DetectionError {
    #[error("degenerate labels: both classes must be present")]
    DegenerateLabels,
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Bottleneck(#[from] BottleneckError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

/// S(h) = -log C_root(f_φ(h)): one bottleneck pass plus one circuit pass.
pub fn nll_score(
    circuit: &CircuitGraph,
    bottleneck: &Bottleneck,
    h: &[f64],
) -> Result<f64, ScoreError> {
    let z = bottleneck.project(h)?;
    Ok(-circuit.log_density(&z)?)
}

/// Circuit-call counter for overhead accounting. One scorer per generation
/// stream; the underlying models stay shared and read-only.
pub struct NllScorer<'a> {
    pub circuit: &'a CircuitGraph,
    pub bottleneck: &'a Bottleneck,
    calls: std::cell::Cell<u64>,
}

impl<'a> NllScorer<'a> {
    pub fn new(circuit: &'a CircuitGraph, bottleneck: &'a Bottleneck) -> Self {
        NllScorer {
            circuit,
            bottleneck,
            calls: std::cell::Cell::new(0),
        }
    }

    pub fn nll(&self, h: &[f64]) -> Result<f64, ScoreError> {
        self.calls.set(self.calls.get() + 1);
        nll_score(self.circuit, self.bottleneck, h)
    }

    /// Number of circuit evaluations performed through this scorer.
    pub fn circuit_evals(&self) -> u64 {
        self.calls.get()
    }
}

/// Deterministic validation/test index split: shuffle 0..n with the seed,
/// reserve round(holdout_frac·n) indices (clamped so both sides keep at
/// least two samples) for the validation side.
pub fn split_indices(n: usize, holdout_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    assert!(n >= 4, "need at least four samples to split");
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64 * holdout_frac).round() as usize).clamp(2, n - 2);
    let test = idx.split_off(n_val);
    (idx, test)
}

fn class_counts(scores: &[ScoredSample]) -> Result<(usize, usize), DetectionError> {
    let n_pos = scores.iter().filter(|s| s.label == Label::Hallucinated).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DetectionError::DegenerateLabels);
    }
    Ok((n_pos, n_neg))
}

/// Precision/recall/F1 at a fixed threshold; hallucinated is positive and
/// predicted when nll ≥ τ. F1 is 0 when precision + recall is 0.
pub fn f1_at(scores: &[ScoredSample], tau: f64) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for s in scores {
        let predicted = s.nll >= tau;
        match (s.label, predicted) {
            (Label::Hallucinated, true) => tp += 1,
            (Label::Hallucinated, false) => fn_ += 1,
            (Label::Factual, true) => fp += 1,
            (Label::Factual, false) => {}
        }
    }
    if 2 * tp + fp + fn_ == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Max-F1 threshold over the midpoints between consecutive sorted unique NLL
/// values, plus one candidate below the minimum (the all-positive predictor).
/// Ties in F1 resolve to the smallest τ.
pub fn calibrate_threshold(scores: &[ScoredSample]) -> Result<Threshold, DetectionError> {
    let (n_pos, _) = class_counts(scores)?;
    let mut sorted: Vec<&ScoredSample> = scores.iter().collect();
    sorted.sort_by(|a, b| a.nll.total_cmp(&b.nll));

    // Suffix positive/negative counts at each unique-value boundary.
    let mut candidates = Vec::new();
    candidates.push(sorted[0].nll - 1.0);
    for w in sorted.windows(2) {
        if w[0].nll != w[1].nll {
            candidates.push(w[0].nll + 0.5 * (w[1].nll - w[0].nll));
        }
    }

    let mut best = Threshold {
        tau: f64::NEG_INFINITY,
        f1_at_tau: -1.0,
    };
    // Walk candidates in increasing order, maintaining counts below τ.
    let mut below = 0usize; // samples with nll < tau
    let mut pos_below = 0usize;
    for &tau in &candidates {
        while below < sorted.len() && sorted[below].nll < tau {
            if sorted[below].label == Label::Hallucinated {
                pos_below += 1;
            }
            below += 1;
        }
        let tp = n_pos - pos_below;
        let fp = (sorted.len() - below) - tp;
        let fn_ = pos_below;
        let f1 = if 2 * tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        if f1 > best.f1_at_tau {
            best = Threshold { tau, f1_at_tau: f1 };
        }
    }
    Ok(best)
}

/// Mann-Whitney AUROC: the probability that a random hallucinated sample
/// outscores a random factual one, ties counted 1/2. Computed via average
/// ranks, O(n log n).
pub fn auroc(scores: &[ScoredSample]) -> Result<f64, DetectionError> {
    let (n_pos, n_neg) = class_counts(scores)?;
    let mut sorted: Vec<&ScoredSample> = scores.iter().collect();
    sorted.sort_by(|a, b| a.nll.total_cmp(&b.nll));
    let mut rank_sum_pos = 0.0;
    let mut i = 0usize;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].nll == sorted[i].nll {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged over the tie group.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for s in &sorted[i..j] {
            if s.label == Label::Hallucinated {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Detection report emitted by the evaluation pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub auroc: f64,
    pub f1: f64,
    pub tau: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub per_sample: Vec<ScoredSample>,
}
