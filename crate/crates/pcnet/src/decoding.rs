//! Dynamic gating and density-penalized lookahead token selection.
//!
//! At each step the current hidden state is scored once: β = σ(nll - τ).
//! Below the gate margin the step is greedy and untouched (no lookahead
//! calls at all). At or above it, the top-k tokens by LM log-probability are
//! re-ranked by
//!
//! ```text
//!   score(c) = log P_LM(c | prefix) - β · nll(f_φ(h_next(c)))
//! ```
//!
//! so the same β penalizes all k candidates of the step. Every argmax breaks
//! ties toward the lowest token id, which keeps generation reproducible.

use crate::bottleneck::Bottleneck;
use crate::circuit::CircuitGraph;
use crate::detection::{NllScorer, ScoreError};
use crate::math::sigmoid;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum LmError {
    #[error("unknown token {token} (vocabulary size {vocab_size})")]
    UnknownToken { token: TokenId, vocab_size: usize },
    #[error("prefix must be non-empty")]
    EmptyPrefix,
}

/// Contract a language model must provide for gated decoding: normalized
/// log-probabilities, the current hidden state, and a side-effect-free
/// one-token lookahead of the next hidden state.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn d_llm(&self) -> usize;
    /// Vocabulary log-probabilities for the next token (exp sums to 1).
    fn logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>, LmError>;
    /// Hidden state after consuming the whole prefix.
    fn hidden(&self, prefix: &[TokenId]) -> Result<Vec<f64>, LmError>;
    /// Hidden state the model would reach after appending `candidate`.
    /// Must not affect any subsequent call on the unextended prefix.
    fn lookahead_hidden(&self, prefix: &[TokenId], candidate: TokenId)
        -> Result<Vec<f64>, LmError>;
}

/// β = σ(nll - τ).
pub fn gate_strength(nll: f64, tau: f64) -> f64 {
    sigmoid(nll - tau)
}

/// Penalized log-probability of one candidate.
pub fn ldcd_score(lm_logprob: f64, beta: f64, candidate_nll: f64) -> f64 {
    lm_logprob - beta * candidate_nll
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub token: TokenId,
    pub lm_logprob: f64,
    pub candidate_nll: f64,
    pub ldcd_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub step: usize,
    pub nll: f64,
    pub beta: f64,
    pub intervened: bool,
    pub chosen_token: TokenId,
    /// Scored top-k candidates; empty when the step was not intervened.
    pub candidates: Vec<CandidateScore>,
}

/// How the gate is driven. `Gated` is the production rule; `ForcedFull`
/// models indiscriminate correction by intervening at every step with the
/// penalty pinned to full strength (β = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatePolicy {
    Gated,
    ForcedFull,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub tau: f64,
    pub k: usize,
    pub gate_margin: f64,
    pub policy: GatePolicy,
}

impl DecodeOptions {
    pub fn gated(tau: f64, k: usize, gate_margin: f64) -> Self {
        DecodeOptions {
            tau,
            k,
            gate_margin,
            policy: GatePolicy::Gated,
        }
    }
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("max_tokens must be at least 1")]
    InvalidMaxTokens,
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Greedy argmax over the full vocabulary, lowest token id on ties.
fn greedy_token(logits: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Indices of the k largest logits, ordered by descending log-probability
/// with ascending token id on ties.
fn top_k(logits: &[f64], k: usize) -> Vec<TokenId> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k.min(logits.len()));
    idx.into_iter().map(|i| i as TokenId).collect()
}

fn step_with_scorer(
    lm: &dyn LanguageModel,
    prefix: &[TokenId],
    scorer: &NllScorer<'_>,
    opts: &DecodeOptions,
    step: usize,
) -> Result<GateDecision, DecodeError> {
    if opts.k == 0 {
        return Err(DecodeError::InvalidK);
    }
    if prefix.is_empty() {
        return Err(DecodeError::Lm(LmError::EmptyPrefix));
    }
    let h = lm.hidden(prefix)?;
    let nll = scorer.nll(&h)?;
    let natural_beta = gate_strength(nll, opts.tau);
    let (intervened, beta) = match opts.policy {
        GatePolicy::Gated => (natural_beta >= opts.gate_margin, natural_beta),
        GatePolicy::ForcedFull => (true, 1.0),
    };
    let logits = lm.logits(prefix)?;

    if !intervened {
        return Ok(GateDecision {
            step,
            nll,
            beta,
            intervened: false,
            chosen_token: greedy_token(&logits),
            candidates: Vec::new(),
        });
    }

    let mut candidates = Vec::with_capacity(opts.k);
    for token in top_k(&logits, opts.k) {
        let h_next = lm.lookahead_hidden(prefix, token)?;
        let candidate_nll = scorer.nll(&h_next)?;
        let lm_logprob = logits[token as usize];
        candidates.push(CandidateScore {
            token,
            lm_logprob,
            candidate_nll,
            ldcd_score: ldcd_score(lm_logprob, beta, candidate_nll),
        });
    }
    let mut best = &candidates[0];
    for c in &candidates[1..] {
        if c.ldcd_score > best.ldcd_score
            || (c.ldcd_score == best.ldcd_score && c.token < best.token)
        {
            best = c;
        }
    }
    Ok(GateDecision {
        step,
        nll,
        beta,
        intervened: true,
        chosen_token: best.token,
        candidates,
    })
}

/// One gated decoding step on an explicit prefix.
pub fn decode_step(
    lm: &dyn LanguageModel,
    prefix: &[TokenId],
    circuit: &CircuitGraph,
    bottleneck: &Bottleneck,
    tau: f64,
    k: usize,
    gate_margin: f64,
) -> Result<GateDecision, DecodeError> {
    let scorer = NllScorer::new(circuit, bottleneck);
    step_with_scorer(
        lm,
        prefix,
        &scorer,
        &DecodeOptions::gated(tau, k, gate_margin),
        0,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Tokens appended after the prompt.
    pub tokens: Vec<TokenId>,
    pub decisions: Vec<GateDecision>,
    /// Total circuit evaluations: Σ (1 + k·[intervened]) over steps.
    pub circuit_evals: u64,
}

impl Generation {
    pub fn intervened(&self) -> bool {
        self.decisions.iter().any(|d| d.intervened)
    }

    pub fn intervened_steps(&self) -> usize {
        self.decisions.iter().filter(|d| d.intervened).count()
    }
}

/// Iterate gated decode steps from a prompt, recording one decision per
/// generated token.
pub fn generate(
    lm: &dyn LanguageModel,
    prompt: &[TokenId],
    circuit: &CircuitGraph,
    bottleneck: &Bottleneck,
    tau: f64,
    k: usize,
    gate_margin: f64,
    max_tokens: usize,
) -> Result<Generation, DecodeError> {
    generate_with(
        lm,
        prompt,
        circuit,
        bottleneck,
        &DecodeOptions::gated(tau, k, gate_margin),
        max_tokens,
    )
}

pub fn generate_with(
    lm: &dyn LanguageModel,
    prompt: &[TokenId],
    circuit: &CircuitGraph,
    bottleneck: &Bottleneck,
    opts: &DecodeOptions,
    max_tokens: usize,
) -> Result<Generation, DecodeError> {
    if max_tokens == 0 {
        return Err(DecodeError::InvalidMaxTokens);
    }
    if prompt.is_empty() {
        return Err(DecodeError::Lm(LmError::EmptyPrefix));
    }
    let scorer = NllScorer::new(circuit, bottleneck);
    let mut seq = prompt.to_vec();
    let mut decisions = Vec::with_capacity(max_tokens);
    for step in 0..max_tokens {
        let d = step_with_scorer(lm, &seq, &scorer, opts, step)?;
        seq.push(d.chosen_token);
        decisions.push(d);
    }
    Ok(Generation {
        tokens: seq[prompt.len()..].to_vec(),
        decisions,
        circuit_evals: scorer.circuit_evals(),
    })
}

/// Pure greedy rollout (no scoring, no gating); the bit-exact baseline the
/// closed gate must reproduce.
pub fn greedy_generate(
    lm: &dyn LanguageModel,
    prompt: &[TokenId],
    max_tokens: usize,
) -> Result<Vec<TokenId>, DecodeError> {
    if prompt.is_empty() {
        return Err(DecodeError::Lm(LmError::EmptyPrefix));
    }
    let mut seq = prompt.to_vec();
    for _ in 0..max_tokens {
        let logits = lm.logits(&seq)?;
        seq.push(greedy_token(&logits));
    }
    Ok(seq[prompt.len()..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bottleneck::Bottleneck;
    use crate::circuit::{CircuitGraph, LeafParams, NodeId, NodeKind};
    use crate::math::{log_softmax_inplace, Matrix};

    #[test]
    fn gate_strength_matches_the_sigmoid_algebra() {
        assert_eq!(gate_strength(3.0, 3.0), 0.5);
        // nll = τ - ln(1/δ - 1) gives β = δ exactly at δ = 0.05.
        let tau = 7.0;
        let nll = tau - (1.0 / 0.05 - 1.0f64).ln();
        assert!((gate_strength(nll, tau) - 0.05).abs() < 1e-12);
        assert!((nll - (tau - 2.9444389791664403)).abs() < 1e-10);
        // Sigmoid tail.
        assert!((gate_strength(10.0, 0.0) - 0.9999546021312976).abs() < 1e-12);
        // Closed gate at τ = +inf.
        assert_eq!(gate_strength(5.0, f64::INFINITY), 0.0);
    }

    #[test]
    fn ldcd_score_arithmetic() {
        assert_eq!(ldcd_score(-1.0, 0.5, 4.0), -3.0);
        // β → 0 degenerates to the raw log-probability.
        assert_eq!(ldcd_score(-1.25, 0.0, 123.0), -1.25);
        // Equal log-probabilities: lower candidate NLL wins.
        assert!(ldcd_score(-1.0, 0.3, 2.0) > ldcd_score(-1.0, 0.3, 5.0));
    }

    /// Hand-specified LM: fixed per-position logits and hidden states keyed
    /// by the last token of the prefix.
    struct TableLm {
        vocab: usize,
        d: usize,
        logits_by_last: Vec<Vec<f64>>,
        hidden_by_last: Vec<Vec<f64>>,
    }

    impl LanguageModel for TableLm {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn d_llm(&self) -> usize {
            self.d
        }
        fn logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>, LmError> {
            let last = *prefix.last().ok_or(LmError::EmptyPrefix)? as usize;
            if last >= self.vocab {
                return Err(LmError::UnknownToken {
                    token: last as TokenId,
                    vocab_size: self.vocab,
                });
            }
            let mut l = self.logits_by_last[last].clone();
            log_softmax_inplace(&mut l);
            Ok(l)
        }
        fn hidden(&self, prefix: &[TokenId]) -> Result<Vec<f64>, LmError> {
            let last = *prefix.last().ok_or(LmError::EmptyPrefix)? as usize;
            Ok(self.hidden_by_last[last].clone())
        }
        fn lookahead_hidden(
            &self,
            _prefix: &[TokenId],
            candidate: TokenId,
        ) -> Result<Vec<f64>, LmError> {
            Ok(self.hidden_by_last[candidate as usize].clone())
        }
    }

    /// Single standard-Gaussian leaf over a 1-d latent; identity bottleneck
    /// from a 1-d hidden space, so nll(h) = -log N(h).
    fn unit_model() -> (CircuitGraph, Bottleneck) {
        let circuit = CircuitGraph {
            nodes: vec![NodeKind::Leaf {
                dim: 0,
                params: LeafParams::from_constrained(20.0, [1.0, 0.0, 0.0], 0.0, 1.0, 5.0),
            }],
            root: NodeId(0),
            num_dims: 1,
            depth: 1,
            branching: 2,
            seed: 0,
        };
        // z = relu(h) - relu(-h) = h (two mid units).
        let bottleneck = Bottleneck {
            w1: Matrix::from_vec(2, 1, vec![1.0, -1.0]),
            b1: vec![0.0; 2],
            w2: Matrix::from_vec(1, 2, vec![1.0, -1.0]),
            b2: vec![0.0],
        };
        (circuit, bottleneck)
    }

    fn toy_lm() -> TableLm {
        // Token 0 leads to an on-manifold state (h = 0.1); tokens 1 and 2
        // land 4σ and 2.5σ out.
        TableLm {
            vocab: 3,
            d: 1,
            logits_by_last: vec![
                vec![0.0, 1.0, 0.5], // greedy from token 0 is token 1
                vec![0.0, 0.2, 0.1],
                vec![1.0, 0.0, 0.0],
            ],
            hidden_by_last: vec![vec![0.1], vec![4.0], vec![2.5]],
        }
    }

    #[test]
    fn closed_gate_emits_the_greedy_token_with_no_lookahead() {
        let (circuit, bottleneck) = unit_model();
        let lm = toy_lm();
        let d = decode_step(&lm, &[0], &circuit, &bottleneck, f64::INFINITY, 3, 0.05).unwrap();
        assert!(!d.intervened);
        assert_eq!(d.chosen_token, 1);
        assert!(d.candidates.is_empty());
        assert_eq!(d.beta, 0.0);
    }

    #[test]
    fn k_equals_one_reduces_to_greedy_even_when_intervened() {
        let (circuit, bottleneck) = unit_model();
        let lm = toy_lm();
        let d = decode_step(&lm, &[0], &circuit, &bottleneck, f64::NEG_INFINITY, 1, 0.05).unwrap();
        assert!(d.intervened);
        assert_eq!(d.candidates.len(), 1);
        assert_eq!(d.chosen_token, 1, "single candidate cannot be re-ranked");
    }

    #[test]
    fn intervention_reranks_toward_the_manifold() {
        let (circuit, bottleneck) = unit_model();
        let lm = toy_lm();
        // τ far below every nll → β ≈ 1 → the density penalty dominates.
        let d = decode_step(&lm, &[0], &circuit, &bottleneck, -50.0, 3, 0.05).unwrap();
        assert!(d.intervened);
        assert!((d.beta - 1.0).abs() < 1e-9);
        // Token 1's state sits 4σ out; token 0 (h=0.1) has the lowest nll and
        // should win despite its lower log-probability.
        assert_eq!(d.chosen_token, 0);
        // Brute-force re-scoring oracle over all candidates.
        let logits = lm.logits(&[0]).unwrap();
        let scorer = NllScorer::new(&circuit, &bottleneck);
        let mut best_tok = 0;
        let mut best_score = f64::NEG_INFINITY;
        for tok in 0..3u32 {
            let h = lm.lookahead_hidden(&[0], tok).unwrap();
            let s = logits[tok as usize] - d.beta * scorer.nll(&h).unwrap();
            if s > best_score {
                best_score = s;
                best_tok = tok;
            }
        }
        assert_eq!(d.chosen_token, best_tok);
        // The flip condition: β·(nll_greedy - nll_alt) > logprob_greedy - logprob_alt.
        let nll_greedy = d.candidates.iter().find(|c| c.token == 1).unwrap();
        let nll_alt = d.candidates.iter().find(|c| c.token == 0).unwrap();
        assert!(
            d.beta * (nll_greedy.candidate_nll - nll_alt.candidate_nll)
                > nll_greedy.lm_logprob - nll_alt.lm_logprob
        );
    }

    #[test]
    fn lookahead_accounting_is_exact() {
        let (circuit, bottleneck) = unit_model();
        let lm = toy_lm();
        // Closed gate: exactly 1 circuit eval per token.
        let g = generate(&lm, &[0], &circuit, &bottleneck, f64::INFINITY, 3, 0.05, 4).unwrap();
        assert_eq!(g.circuit_evals, 4);
        // Open gate with k=3: exactly 1 + 3 per token.
        let g = generate(&lm, &[0], &circuit, &bottleneck, -50.0, 3, 0.05, 4).unwrap();
        assert_eq!(g.circuit_evals, 4 * (1 + 3));
    }

    #[test]
    fn decode_step_is_non_destructive() {
        let (circuit, bottleneck) = unit_model();
        let lm = toy_lm();
        let a = decode_step(&lm, &[0, 2], &circuit, &bottleneck, -1.0, 3, 0.05).unwrap();
        let b = decode_step(&lm, &[0, 2], &circuit, &bottleneck, -1.0, 3, 0.05).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn closed_gate_generation_equals_greedy() {
        let (circuit, bottleneck) = unit_model();
        let lm = toy_lm();
        let gated = generate(&lm, &[2], &circuit, &bottleneck, f64::INFINITY, 3, 0.05, 6).unwrap();
        let greedy = greedy_generate(&lm, &[2], 6).unwrap();
        assert_eq!(gated.tokens, greedy);
        assert!(!gated.intervened());
    }

    #[test]
    fn forced_full_policy_pins_beta_to_one() {
        let (circuit, bottleneck) = unit_model();
        let lm = toy_lm();
        let opts = DecodeOptions {
            tau: f64::INFINITY, // would close the gate if it were consulted
            k: 3,
            gate_margin: 0.05,
            policy: GatePolicy::ForcedFull,
        };
        let g = generate_with(&lm, &[0], &circuit, &bottleneck, &opts, 3).unwrap();
        for d in &g.decisions {
            assert!(d.intervened);
            assert_eq!(d.beta, 1.0);
            assert_eq!(d.candidates.len(), 3);
        }
    }

    #[test]
    fn preconditions_are_checked() {
        let (circuit, bottleneck) = unit_model();
        let lm = toy_lm();
        assert!(matches!(
            decode_step(&lm, &[], &circuit, &bottleneck, 0.0, 3, 0.05),
            Err(DecodeError::Lm(LmError::EmptyPrefix))
        ));
        assert!(matches!(
            decode_step(&lm, &[0], &circuit, &bottleneck, 0.0, 0, 0.05),
            Err(DecodeError::InvalidK)
        ));
        assert!(matches!(
            generate(&lm, &[0], &circuit, &bottleneck, 0.0, 3, 0.05, 0),
            Err(DecodeError::InvalidMaxTokens)
        ));
    }

    #[test]
    fn open_gate_with_full_vocabulary_scores_every_token() {
        let (circuit, bottleneck) = unit_model();
        let lm = toy_lm();
        let g = generate(
            &lm,
            &[0],
            &circuit,
            &bottleneck,
            f64::NEG_INFINITY,
            lm.vocab_size(),
            0.05,
            3,
        )
        .unwrap();
        for d in &g.decisions {
            assert!(d.intervened);
            assert_eq!(d.candidates.len(), lm.vocab_size());
        }
    }

    #[test]
    fn top_k_orders_by_logprob_then_id() {
        let logits = vec![0.5, 2.0, 0.5, -1.0, 2.0];
        assert_eq!(top_k(&logits, 4), vec![1, 4, 0, 2]);
        assert_eq!(top_k(&logits, 99).len(), 5);
    }
}
