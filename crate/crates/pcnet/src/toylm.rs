//! Deterministic recurrent toy language model with planted factual-manifold
//! dynamics.
//!
//! States evolve as h' = tanh(W·h + E[token]). Factual token embeddings lie
//! in the span of a small set of orthonormal anchor directions. Every
//! hallucination token is the *twin* of one factual token: its in-span part
//! is the twin's embedding (slightly shrunk and jittered) plus a
//! displacement along a unit direction orthogonal to every anchor.
//! Consuming a hallucination token therefore pushes the state off the
//! factual manifold by exactly the planted magnitude, and at displacement 0
//! the two token classes are exchangeable up to the jitter, so there is no
//! signal to find. Ground-truth state labels are exact by construction.
//!
//! Logits are a log-softmax of U·h with U proportional to the embedding
//! table, so states aligned with the hallucination direction prefer
//! hallucination tokens: off-manifold trajectories deepen unless a decoder
//! intervenes. The one-step recurrence makes candidate lookahead exact,
//! cheap, and trivially side-effect free.

use crate::bottleneck::Bottleneck;
use crate::circuit::CircuitGraph;
use crate::decoding::{
    generate_with, greedy_generate, DecodeError, DecodeOptions, Generation, LanguageModel,
    LmError, TokenId,
};
use crate::math::{dot, log_softmax_inplace, sample_standard_normal, Matrix};
use crate::training::PairedBatch;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenTag {
    Factual,
    Hallucination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub d_llm: usize,
    pub n_anchors: usize,
    /// Number of hallucination tokens; must not exceed the factual count
    /// since each one twins a distinct factual token.
    pub n_halluc_tokens: usize,
    /// Magnitude of the planted off-manifold displacement.
    pub displacement: f64,
    /// Contraction target for the recurrence: W is Frobenius-scaled to
    /// recurrence_scale·√d/2, which puts the spectral norm of an iid
    /// Gaussian matrix near recurrence_scale (< 1 keeps the linear part
    /// contractive; tanh bounds the state regardless).
    pub recurrence_scale: f64,
    /// Multiplier on U = sharpness·E; controls how peaked the logits are.
    pub logit_sharpness: f64,
    /// In-span scale of a twin relative to its factual token.
    pub twin_shrink: f64,
    /// In-span jitter added to each twin so ties break both ways.
    pub twin_jitter: f64,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        ToyLmConfig {
            vocab_size: 32,
            d_llm: 64,
            n_anchors: 4,
            n_halluc_tokens: 16,
            displacement: 2.0,
            recurrence_scale: 0.9,
            logit_sharpness: 0.25,
            twin_shrink: 0.98,
            twin_jitter: 0.02,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLmSpec {
    pub config: ToyLmConfig,
    /// vocab_size × d_llm token embeddings.
    pub embeddings: Matrix,
    /// d_llm × d_llm contractive recurrence.
    pub recurrence: Matrix,
    /// vocab_size × d_llm output map.
    pub output: Matrix,
    /// n_anchors × d_llm orthonormal factual anchor directions.
    pub anchors: Matrix,
    /// Unit displacement direction, orthogonal to all anchors.
    pub halluc_direction: Vec<f64>,
    pub token_tags: Vec<TokenTag>,
    /// Bound every trajectory norm stays under (tanh keeps ‖h‖ ≤ √d).
    pub norm_bound: f64,
}

impl ToyLmSpec {
    /// Deterministic construction from a config.
    pub fn build(config: ToyLmConfig) -> ToyLmSpec {
        assert!(config.vocab_size >= 2, "vocabulary too small");
        let n_fact = config.vocab_size - config.n_halluc_tokens;
        assert!(
            config.n_halluc_tokens >= 1 && config.n_halluc_tokens <= n_fact,
            "hallucination tokens must each twin a distinct factual token"
        );
        assert!(
            config.n_anchors + 1 <= config.d_llm,
            "anchors plus displacement direction must fit in d_llm"
        );
        let d = config.d_llm;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        // Orthonormal frame: n_anchors factual directions + 1 displacement.
        let frame = orthonormal_rows(config.n_anchors + 1, d, &mut rng);
        let mut anchors = Matrix::zeros(config.n_anchors, d);
        for a in 0..config.n_anchors {
            anchors.data[a * d..(a + 1) * d].copy_from_slice(frame.row(a));
        }
        let halluc_direction = frame.row(config.n_anchors).to_vec();

        let mut token_tags = vec![TokenTag::Factual; n_fact];
        token_tags.extend(std::iter::repeat(TokenTag::Hallucination).take(config.n_halluc_tokens));

        // Helper: unit-norm random combination of the anchors.
        let in_span = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut coef: Vec<f64> = (0..config.n_anchors)
                .map(|_| sample_standard_normal(rng))
                .collect();
            let norm = crate::math::l2_norm(&coef).max(1e-12);
            for c in coef.iter_mut() {
                *c /= norm;
            }
            let mut e = vec![0.0; d];
            for (a, c) in coef.iter().enumerate() {
                for i in 0..d {
                    e[i] += c * anchors.get(a, i);
                }
            }
            e
        };

        let mut embeddings = Matrix::zeros(config.vocab_size, d);
        for v in 0..n_fact {
            let e = in_span(&mut rng);
            embeddings.data[v * d..(v + 1) * d].copy_from_slice(&e);
        }
        // Hallucination token n_fact + j twins factual token j: shrunk and
        // jittered in-span part plus the planted displacement.
        for j in 0..config.n_halluc_tokens {
            let v = n_fact + j;
            let jitter = in_span(&mut rng);
            for i in 0..d {
                embeddings.data[v * d + i] = config.twin_shrink * embeddings.get(j, i)
                    + config.twin_jitter * jitter[i]
                    + config.displacement * halluc_direction[i];
            }
        }

        let mut recurrence = Matrix::zeros(d, d);
        for w in recurrence.data.iter_mut() {
            *w = sample_standard_normal(&mut rng);
        }
        let fro = recurrence.frobenius_norm().max(1e-12);
        let target = config.recurrence_scale * (d as f64).sqrt() / 2.0;
        for w in recurrence.data.iter_mut() {
            *w *= target / fro;
        }

        let mut output = embeddings.clone();
        for u in output.data.iter_mut() {
            *u *= config.logit_sharpness;
        }

        ToyLmSpec {
            norm_bound: (d as f64).sqrt(),
            config,
            embeddings,
            recurrence,
            output,
            anchors,
            halluc_direction,
            token_tags,
        }
    }

    pub fn tag(&self, token: TokenId) -> Option<TokenTag> {
        self.token_tags.get(token as usize).copied()
    }

    pub fn n_factual(&self) -> usize {
        self.config.vocab_size - self.config.n_halluc_tokens
    }

    /// The hallucination twin of factual token `j`, if it has one.
    pub fn twin_of_factual(&self, j: TokenId) -> Option<TokenId> {
        if (j as usize) < self.config.n_halluc_tokens {
            Some((self.n_factual() + j as usize) as TokenId)
        } else {
            None
        }
    }

    pub fn is_factual(&self, token: TokenId) -> bool {
        self.tag(token) == Some(TokenTag::Factual)
    }

    pub fn factual_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.config.vocab_size as TokenId).filter(|&t| self.is_factual(t))
    }

    pub fn halluc_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.config.vocab_size as TokenId).filter(|&t| !self.is_factual(t))
    }

    /// h' = tanh(W·h + E[token]).
    pub fn step_hidden(&self, h: &[f64], token: TokenId) -> Result<Vec<f64>, LmError> {
        if token as usize >= self.config.vocab_size {
            return Err(LmError::UnknownToken {
                token,
                vocab_size: self.config.vocab_size,
            });
        }
        debug_assert_eq!(h.len(), self.config.d_llm);
        let mut next = self.recurrence.matvec(h);
        let e = self.embeddings.row(token as usize);
        for (n, ei) in next.iter_mut().zip(e) {
            *n = (*n + ei).tanh();
        }
        Ok(next)
    }

    fn roll(&self, prefix: &[TokenId]) -> Result<Vec<f64>, LmError> {
        if prefix.is_empty() {
            return Err(LmError::EmptyPrefix);
        }
        let mut h = vec![0.0; self.config.d_llm];
        for &t in prefix {
            h = self.step_hidden(&h, t)?;
        }
        Ok(h)
    }

    fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let mut l = self.output.matvec(h);
        log_softmax_inplace(&mut l);
        l
    }

    /// Greedy rollout restricted to factual tokens: the intended
    /// continuation used as gold for adversarial prompts.
    pub fn factual_greedy(&self, prompt: &[TokenId], steps: usize) -> Result<Vec<TokenId>, LmError> {
        let mut h = self.roll(prompt)?;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let logits = self.logits_from_hidden(&h);
            let mut best: Option<TokenId> = None;
            for t in self.factual_tokens() {
                if best.is_none_or(|b| logits[t as usize] > logits[b as usize]) {
                    best = Some(t);
                }
            }
            let tok = best.expect("vocabulary always contains factual tokens");
            h = self.step_hidden(&h, tok)?;
            out.push(tok);
        }
        Ok(out)
    }
}

impl LanguageModel for ToyLmSpec {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn d_llm(&self) -> usize {
        self.config.d_llm
    }

    fn logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>, LmError> {
        Ok(self.logits_from_hidden(&self.roll(prefix)?))
    }

    fn hidden(&self, prefix: &[TokenId]) -> Result<Vec<f64>, LmError> {
        self.roll(prefix)
    }

    fn lookahead_hidden(
        &self,
        prefix: &[TokenId],
        candidate: TokenId,
    ) -> Result<Vec<f64>, LmError> {
        let h = self.roll(prefix)?;
        self.step_hidden(&h, candidate)
    }
}

fn orthonormal_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for r in 0..n {
        let mut v: Vec<f64> = (0..d).map(|_| sample_standard_normal(rng)).collect();
        for prev in 0..r {
            let p = m.row(prev);
            let proj = dot(&v, p);
            for (vi, pi) in v.iter_mut().zip(p) {
                *vi -= proj * pi;
            }
        }
        let norm = crate::math::l2_norm(&v).max(1e-12);
        for (i, vi) in v.iter().enumerate() {
            m.data[r * d + i] = vi / norm;
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Planted corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    /// Greedy continuation stays factual over the whole horizon.
    Clean,
    /// Greedy next token is hallucination-tagged while at least one top-k
    /// alternative is factual, so density re-ranking has a real choice.
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPrompt {
    pub tokens: Vec<TokenId>,
    pub kind: PromptKind,
    pub gold: Vec<TokenId>,
    /// Per-token tags of the gold continuation.
    pub labels: Vec<TokenTag>,
}

/// Prompts plus the paired hidden-state dataset extracted at last-token
/// positions: h⁺ from clean-prompt final states, h⁻ from the same states
/// after consuming one hallucination token.
#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub prompts: Vec<CorpusPrompt>,
    pub states: PairedBatch,
    pub gen_len: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("n_samples must be even, got {0}")]
    OddSampleCount(usize),
    #[error("could not plant enough prompts after {attempts} attempts \
             (clean {clean}/{want}, adversarial {adversarial}/{want}); \
             the geometry may be degenerate for this configuration")]
    ExhaustedAttempts {
        attempts: usize,
        clean: usize,
        adversarial: usize,
        want: usize,
    },
    #[error(transparent)]
    Lm(#[from] LmError),
}

pub const DEFAULT_GEN_LEN: usize = 8;
pub const DEFAULT_TOP_K: usize = 8;

/// Build a corpus with `n_samples` total paired states (n/2 factual, n/2
/// hallucinated) and `n_samples` prompts (half clean, half adversarial).
pub fn build_planted_corpus(
    spec: &ToyLmSpec,
    n_samples: usize,
    seed: u64,
) -> Result<PlantedCorpus, CorpusError> {
    build_planted_corpus_with(spec, n_samples, seed, DEFAULT_GEN_LEN, DEFAULT_TOP_K)
}

pub fn build_planted_corpus_with(
    spec: &ToyLmSpec,
    n_samples: usize,
    seed: u64,
    gen_len: usize,
    top_k: usize,
) -> Result<PlantedCorpus, CorpusError> {
    if n_samples % 2 != 0 {
        return Err(CorpusError::OddSampleCount(n_samples));
    }
    let want = n_samples / 2;
    // Zero displacement removes the hallucination geometry entirely, so no
    // prompt can have a hallucination-tagged greedy token; the degenerate
    // corpus is all clean prompts plus the (signal-free) paired states.
    let degenerate = spec.config.displacement == 0.0;
    let want_clean = if degenerate { n_samples } else { want };
    let want_adv = if degenerate { 0 } else { want };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factual: Vec<TokenId> = spec.factual_tokens().collect();

    let mut clean = Vec::with_capacity(want_clean);
    let mut adversarial = Vec::with_capacity(want_adv);
    let mut h_pos = Vec::with_capacity(want);
    let mut h_neg = Vec::with_capacity(want);

    let max_attempts = 500 * n_samples.max(8);
    let mut attempts = 0;
    while (clean.len() < want_clean || adversarial.len() < want_adv) && attempts < max_attempts {
        attempts += 1;
        let len = rng.gen_range(4..=7);
        let tokens: Vec<TokenId> = (0..len)
            .map(|_| factual[rng.gen_range(0..factual.len())])
            .collect();

        // Greedy rollout over the horizon.
        let mut h = spec.roll(&tokens)?;
        let prompt_state = h.clone();
        let mut rollout = Vec::with_capacity(gen_len);
        for _ in 0..gen_len {
            let logits = spec.logits_from_hidden(&h);
            let mut best = 0usize;
            for i in 1..logits.len() {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            h = spec.step_hidden(&h, best as TokenId)?;
            rollout.push(best as TokenId);
        }

        let all_factual = rollout.iter().all(|&t| spec.is_factual(t));
        if all_factual && clean.len() < want_clean {
            let labels = vec![TokenTag::Factual; rollout.len()];
            if h_pos.len() < want {
                // Paired states: one more factual token versus its
                // hallucination twin from the same prefix state, so the pair
                // differs only by the planted displacement (plus jitter).
                let j = rng.gen_range(0..spec.config.n_halluc_tokens) as TokenId;
                let twin = spec.twin_of_factual(j).expect("j indexes a twinned token");
                h_pos.push(spec.step_hidden(&prompt_state, j)?);
                h_neg.push(spec.step_hidden(&prompt_state, twin)?);
            }
            clean.push(CorpusPrompt {
                tokens,
                kind: PromptKind::Clean,
                gold: rollout,
                labels,
            });
            continue;
        }

        if !spec.is_factual(rollout[0]) && adversarial.len() < want_adv {
            // Re-ranking must have a factual token within reach.
            let logits = spec.logits_from_hidden(&prompt_state);
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            let reachable = idx
                .iter()
                .take(top_k)
                .any(|&t| spec.is_factual(t as TokenId));
            if reachable {
                let gold = spec.factual_greedy(&tokens, gen_len)?;
                let labels = vec![TokenTag::Factual; gold.len()];
                adversarial.push(CorpusPrompt {
                    tokens,
                    kind: PromptKind::Adversarial,
                    gold,
                    labels,
                });
            }
        }
    }

    if clean.len() < want_clean || adversarial.len() < want_adv {
        return Err(CorpusError::ExhaustedAttempts {
            attempts,
            clean: clean.len(),
            adversarial: adversarial.len(),
            want,
        });
    }

    // Interleave so prefix slices of the prompt list stay balanced.
    let mut prompts = Vec::with_capacity(n_samples);
    let mut adv_iter = adversarial.into_iter();
    for c in clean {
        prompts.push(c);
        if let Some(a) = adv_iter.next() {
            prompts.push(a);
        }
    }
    Ok(PlantedCorpus {
        prompts,
        states: PairedBatch { h_pos, h_neg },
        gen_len,
    })
}

impl PlantedCorpus {
    /// One JSON object per prompt: tokens, gold continuation, per-token tags.
    pub fn prompts_to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.prompts {
            out.push_str(&serde_json::to_string(p).expect("corpus prompts serialize"));
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Decode evaluation against gold continuations
// ---------------------------------------------------------------------------

/// Outcome of decoding a prompt set in one mode, measured against gold.
#[derive(Debug, Clone, Serialize)]
pub struct DecodeEvalReport {
    pub n_prompts: usize,
    /// Fraction of prompts whose output matches gold exactly.
    pub accuracy: f64,
    pub vanilla_accuracy: f64,
    /// Among vanilla-correct prompts: fraction degraded by this mode.
    pub corruption_rate: f64,
    /// Among vanilla-correct prompts: fraction left intact.
    pub preservation_rate: f64,
    /// Fraction of generations with at least one intervened step.
    pub igr: f64,
    pub per_token_intervention_rate: f64,
    pub total_circuit_evals: u64,
}

/// Decode every prompt with the given options and compare to gold and to
/// the vanilla greedy baseline.
pub fn evaluate_decode(
    lm: &ToyLmSpec,
    prompts: &[CorpusPrompt],
    circuit: &CircuitGraph,
    bottleneck: &Bottleneck,
    opts: &DecodeOptions,
    max_tokens: usize,
) -> Result<(Vec<Generation>, DecodeEvalReport), DecodeError> {
    let mut generations = Vec::with_capacity(prompts.len());
    let mut correct = 0usize;
    let mut vanilla_correct = 0usize;
    let mut degraded = 0usize;
    let mut preserved = 0usize;
    let mut intervened_gens = 0usize;
    let mut intervened_steps = 0usize;
    let mut total_steps = 0usize;
    let mut evals = 0u64;

    for p in prompts {
        let vanilla = greedy_generate(lm, &p.tokens, max_tokens)?;
        let gen = generate_with(lm, &p.tokens, circuit, bottleneck, opts, max_tokens)?;
        let mode_ok = gen.tokens == p.gold;
        let vanilla_ok = vanilla == p.gold;
        correct += usize::from(mode_ok);
        vanilla_correct += usize::from(vanilla_ok);
        if vanilla_ok {
            if mode_ok {
                preserved += 1;
            } else {
                degraded += 1;
            }
        }
        intervened_gens += usize::from(gen.intervened());
        intervened_steps += gen.intervened_steps();
        total_steps += gen.decisions.len();
        evals += gen.circuit_evals;
        generations.push(gen);
    }

    let n = prompts.len();
    let vc = vanilla_correct.max(1) as f64;
    Ok((
        generations,
        DecodeEvalReport {
            n_prompts: n,
            accuracy: correct as f64 / n.max(1) as f64,
            vanilla_accuracy: vanilla_correct as f64 / n.max(1) as f64,
            corruption_rate: degraded as f64 / vc,
            preservation_rate: preserved as f64 / vc,
            igr: intervened_gens as f64 / n.max(1) as f64,
            per_token_intervention_rate: intervened_steps as f64 / total_steps.max(1) as f64,
            total_circuit_evals: evals,
        },
    ))
}
