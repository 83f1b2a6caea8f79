//! Shared test support: independent oracles and the reduced pipeline
//! driver used by the integration and acceptance suites.
//!
//! The oracles deliberately avoid the library's evaluation path: leaf
//! densities come from statrs' closed-form pdfs, and circuit values from an
//! explicit mixture expansion, so agreement is evidence rather than
//! tautology.

#![allow(dead_code)]

use pcnet::bottleneck::{init_bottleneck, Bottleneck};
use pcnet::circuit::{build_random_circuit, CircuitGraph, LeafParams, NodeKind};
use pcnet::detection::{
    auroc, calibrate_threshold, f1_at, nll_score, split_indices, Label, ScoredSample,
};
use pcnet::math::{logsumexp, sigmoid};
use pcnet::toylm::{build_planted_corpus_with, PlantedCorpus, ToyLmConfig, ToyLmSpec};
use pcnet::training::{train, TrainConfig, TrainResult};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, Laplace, Normal, StudentsT};

// Seed derivations; keep in lockstep with the CLI so library-level results
// reproduce command-line runs.
pub const CORPUS_SALT: u64 = 0x1001;
pub const EVAL_SALT: u64 = 0x2002;
pub const BOTTLENECK_SALT: u64 = 0x3003;
pub const SPLIT_SALT: u64 = 0x4004;

/// Closed-form leaf oracle: statrs pdfs, logsumexp of weighted components,
/// sigmoid gate on the log value.
pub fn oracle_leaf_log_density(p: &LeafParams, z: f64) -> f64 {
    let s = p.scale();
    let nu = p.nu();
    let lw = p.log_weights();
    let gauss = Normal::new(p.mu, s).unwrap().ln_pdf(z);
    let laplace = Laplace::new(p.mu, s).unwrap().ln_pdf(z);
    let student = StudentsT::new(p.mu, s, nu).unwrap().ln_pdf(z);
    let mix = logsumexp(&[lw[0] + gauss, lw[1] + laplace, lw[2] + student]);
    let gate = sigmoid(p.g);
    if gate == 0.0 {
        0.0
    } else {
        gate * mix
    }
}

/// One additive term of the circuit polynomial: a log-coefficient from the
/// sum-node choices and the set of leaves multiplied together.
pub struct ExpansionTerm {
    pub log_coef: f64,
    pub leaves: Vec<(usize, LeafParams)>,
}

/// Expand a circuit into its explicit mixture. Exponential in the number of
/// sum nodes; only for small test circuits.
pub fn expand_circuit(circuit: &CircuitGraph) -> Vec<ExpansionTerm> {
    fn expand_node(circuit: &CircuitGraph, id: usize) -> Vec<ExpansionTerm> {
        match &circuit.nodes[id] {
            NodeKind::Leaf { dim, params } => vec![ExpansionTerm {
                log_coef: 0.0,
                leaves: vec![(*dim, params.clone())],
            }],
            NodeKind::Sum {
                children,
                log_weights,
            } => {
                let mut terms = Vec::new();
                for (c, lw) in children.iter().zip(log_weights) {
                    for t in expand_node(circuit, c.index()) {
                        terms.push(ExpansionTerm {
                            log_coef: lw + t.log_coef,
                            leaves: t.leaves,
                        });
                    }
                }
                terms
            }
            NodeKind::Product { children } => {
                let mut terms = vec![ExpansionTerm {
                    log_coef: 0.0,
                    leaves: vec![],
                }];
                for c in children {
                    let child_terms = expand_node(circuit, c.index());
                    let mut next = Vec::with_capacity(terms.len() * child_terms.len());
                    for t in &terms {
                        for ct in &child_terms {
                            let mut leaves = t.leaves.clone();
                            leaves.extend(ct.leaves.iter().cloned());
                            next.push(ExpansionTerm {
                                log_coef: t.log_coef + ct.log_coef,
                                leaves,
                            });
                        }
                    }
                    terms = next;
                }
                terms
            }
        }
    }
    expand_node(circuit, circuit.root.index())
}

/// Term-by-term oracle for log C(z), with leaf values from statrs.
pub fn oracle_log_density(circuit: &CircuitGraph, z: &[f64]) -> f64 {
    let terms = expand_circuit(circuit);
    let summands: Vec<f64> = terms
        .iter()
        .map(|t| {
            t.log_coef
                + t.leaves
                    .iter()
                    .map(|(dim, p)| oracle_leaf_log_density(p, z[*dim]))
                    .sum::<f64>()
        })
        .collect();
    logsumexp(&summands)
}

/// Randomize leaf parameters in place. Saturated gates (g = 20) keep the
/// circuit a normalized density; otherwise gates are drawn too.
pub fn randomize_leaves(circuit: &mut CircuitGraph, rng: &mut ChaCha8Rng, saturate_gates: bool) {
    for node in circuit.nodes.iter_mut() {
        if let NodeKind::Leaf { params, .. } = node {
            params.g = if saturate_gates {
                20.0
            } else {
                rng.gen_range(-2.0..6.0)
            };
            params.w_logits = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            params.mu = rng.gen_range(-2.0..2.0);
            params.log_s = rng.gen_range(-0.69..0.41); // s in [0.5, 1.5]
            params.raw_nu = rng.gen_range(1.1..3.5); // nu in [~5.4, ~32]
        }
    }
}

/// Randomize sum weights onto the simplex.
pub fn randomize_sum_weights(circuit: &mut CircuitGraph, rng: &mut ChaCha8Rng) {
    for node in circuit.nodes.iter_mut() {
        if let NodeKind::Sum { log_weights, .. } = node {
            for w in log_weights.iter_mut() {
                *w = rng.gen_range(-1.5..1.5);
            }
            let lse = logsumexp(log_weights);
            for w in log_weights.iter_mut() {
                *w -= lse;
            }
        }
    }
}

/// Everything one train+detect pipeline point produces.
pub struct PipelinePoint {
    pub lm: ToyLmSpec,
    pub circuit: CircuitGraph,
    pub bottleneck: Bottleneck,
    pub train_corpus: PlantedCorpus,
    pub eval_corpus: PlantedCorpus,
    pub result: TrainResult,
    pub tau: f64,
    pub auroc: f64,
    pub f1: f64,
    pub validation: Vec<ScoredSample>,
    pub test: Vec<ScoredSample>,
}

pub struct PipelineSettings {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub proj_dim: usize,
    pub depth: usize,
    pub branching: usize,
    pub epochs: usize,
    pub displacement: f64,
    pub gen_len: usize,
    pub top_k: usize,
    pub holdout_frac: f64,
}

impl PipelineSettings {
    /// Paper-default settings at desk scale.
    pub fn full(seed: u64) -> Self {
        PipelineSettings {
            seed,
            n_train: 500,
            n_eval: 200,
            proj_dim: 128,
            depth: 4,
            branching: 3,
            epochs: 50,
            displacement: 2.0,
            gen_len: 8,
            top_k: 8,
            holdout_frac: 0.25,
        }
    }

    /// Cheap settings for property sweeps.
    pub fn reduced(seed: u64) -> Self {
        PipelineSettings {
            seed,
            n_train: 200,
            n_eval: 200,
            proj_dim: 32,
            depth: 3,
            branching: 3,
            epochs: 30,
            displacement: 2.0,
            gen_len: 8,
            top_k: 8,
            holdout_frac: 0.25,
        }
    }
}

pub fn run_pipeline(s: &PipelineSettings) -> PipelinePoint {
    let lm = ToyLmSpec::build(ToyLmConfig {
        seed: s.seed,
        displacement: s.displacement,
        ..ToyLmConfig::default()
    });
    let train_corpus =
        build_planted_corpus_with(&lm, s.n_train, s.seed ^ CORPUS_SALT, s.gen_len, s.top_k)
            .expect("training corpus");
    let eval_corpus =
        build_planted_corpus_with(&lm, s.n_eval, s.seed ^ EVAL_SALT, s.gen_len, s.top_k)
            .expect("evaluation corpus");
    let mut circuit = build_random_circuit(s.proj_dim, s.depth, s.branching, s.seed).unwrap();
    let mut bottleneck = init_bottleneck(
        lm.config.d_llm,
        2 * s.proj_dim,
        s.proj_dim,
        s.seed ^ BOTTLENECK_SALT,
    );
    let cfg = TrainConfig {
        seed: s.seed,
        epochs: s.epochs,
        ..TrainConfig::default()
    };
    let result = train(&mut circuit, &mut bottleneck, &train_corpus.states, &cfg).unwrap();

    let mut scores = Vec::with_capacity(s.n_eval);
    for h in &eval_corpus.states.h_pos {
        scores.push(ScoredSample {
            nll: nll_score(&circuit, &bottleneck, h).unwrap(),
            label: Label::Factual,
        });
    }
    for h in &eval_corpus.states.h_neg {
        scores.push(ScoredSample {
            nll: nll_score(&circuit, &bottleneck, h).unwrap(),
            label: Label::Hallucinated,
        });
    }
    let (val_idx, test_idx) = split_indices(scores.len(), s.holdout_frac, s.seed ^ SPLIT_SALT);
    let validation: Vec<ScoredSample> = val_idx.iter().map(|&i| scores[i]).collect();
    let test: Vec<ScoredSample> = test_idx.iter().map(|&i| scores[i]).collect();
    let threshold = calibrate_threshold(&validation).unwrap();
    let auroc_value = auroc(&test).unwrap();
    let f1_value = f1_at(&test, threshold.tau);

    PipelinePoint {
        lm,
        circuit,
        bottleneck,
        train_corpus,
        eval_corpus,
        result,
        tau: threshold.tau,
        auroc: auroc_value,
        f1: f1_value,
        validation,
        test,
    }
}

/// Central finite differences of a scalar function of the flat parameters.
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&[f64]) -> f64,
    at: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(at.len());
    let mut x = at.to_vec();
    for i in 0..at.len() {
        x[i] = at[i] + eps;
        let hi = f(&x);
        x[i] = at[i] - eps;
        let lo = f(&x);
        x[i] = at[i];
        grad.push((hi - lo) / (2.0 * eps));
    }
    grad
}
