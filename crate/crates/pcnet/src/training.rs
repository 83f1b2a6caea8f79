//! Joint optimization of circuit and bottleneck on paired factual /
//! hallucinated hidden states.
//!
//! The objective balances generative density estimation against a
//! contrastive margin penalty:
//!
//! ```text
//!   L = α · E[-log C(z⁺)] + (1-α) · E[max(0, γ + log C(z⁻) - log C(z⁺))],
//!   z = f_φ(h)
//! ```
//!
//! Each step records the whole computation (bottleneck → circuit → loss) on
//! an autodiff tape, backpropagates, clips the global gradient norm, and
//! applies Adam with decoupled weight decay. Sum-node log-weights are
//! re-normalized onto the simplex after every step, keeping the circuit's
//! weight invariant exact rather than approximate.

use crate::autodiff::{clip_global_norm, GradientBundle, SlotId, Tape};
use crate::bottleneck::Bottleneck;
use crate::circuit::{CircuitGraph, NodeKind};
use crate::math::logsumexp;
use crate::params::{
    flatten_params, write_back, ParamLayout, BN_B1, BN_B2, BN_W1, BN_W2, LEAF_G, LEAF_LOG_S,
    LEAF_MU, LEAF_RAW_NU, LEAF_W, SUM_LOG_W,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Equal-length arrays of factual (`h_pos`) and hallucinated (`h_neg`)
/// hidden states. Used both for the full training pool and for mini-batches.
#[derive(Debug, Clone, Default)]
pub struct PairedBatch {
    pub h_pos: Vec<Vec<f64>>,
    pub h_neg: Vec<Vec<f64>>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.h_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h_pos.is_empty()
    }

    pub fn check(&self) -> Result<(), TrainError> {
        if self.h_pos.len() != self.h_neg.len() || self.h_pos.is_empty() {
            return Err(TrainError::UnbalancedBatch {
                pos: self.h_pos.len(),
                neg: self.h_neg.len(),
            });
        }
        for (i, h) in self.h_pos.iter().chain(self.h_neg.iter()).enumerate() {
            if h.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite { index: i % self.h_pos.len() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Loss weight between the generative and contrastive terms, in [0, 1].
    pub alpha: f64,
    /// Contrastive margin, > 0.
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.8,
            gamma: 5.0,
            lr: 1e-3,
            weight_decay: 1e-5,
            epochs: 50,
            batch_size: 8,
            clip_norm: 1.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, reason: &str| {
            Err(TrainError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", "must lie in [0, 1]");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma", "must be positive");
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return bad("lr", "must be a finite non-negative number");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be positive");
        }
        Ok(())
    }
}

/// Adam moment accumulators aligned with the flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean positive NLL (the generative term, unweighted by α).
    pub generative_nll: f64,
    /// Mean hinge value (the contrastive term, unweighted by 1-α).
    pub contrastive_margin: f64,
    /// Fraction of pairs with log C(z⁺) - log C(z⁻) < γ.
    pub margin_violation_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total_loss: f64,
    pub pos_nll: f64,
    pub neg_nll: f64,
    pub margin_violation_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub history: Vec<EpochStats>,
    /// Post-clip global gradient norm at every optimizer step.
    pub grad_norms: Vec<f64>,
    /// Step index at which the loss became non-finite, if training aborted.
    /// Model parameters are rolled back to the last finite step.
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("batch has {pos} positive and {neg} negative samples; counts must be equal and non-zero")]
    UnbalancedBatch { pos: usize, neg: usize },
    #[error("non-finite loss contribution at sample {index}")]
    NonFinite { index: usize },
    #[error("evaluation failed at sample {index}: {message}")]
    Eval { index: usize, message: String },
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

/// Composite loss evaluated directly (no tape), with per-term breakdown.
pub fn composite_loss(
    circuit: &CircuitGraph,
    bottleneck: &Bottleneck,
    batch: &PairedBatch,
    alpha: f64,
    gamma: f64,
) -> Result<LossBreakdown, TrainError> {
    batch.check()?;
    let n = batch.len() as f64;
    let mut pos_sum = 0.0;
    let mut hinge_sum = 0.0;
    let mut violations = 0usize;
    for i in 0..batch.len() {
        let eval = |h: &[f64]| -> Result<f64, TrainError> {
            let z = bottleneck.project(h).map_err(|e| TrainError::Eval {
                index: i,
                message: e.to_string(),
            })?;
            circuit.log_density(&z).map_err(|e| TrainError::Eval {
                index: i,
                message: e.to_string(),
            })
        };
        let log_pos = eval(&batch.h_pos[i])?;
        let log_neg = eval(&batch.h_neg[i])?;
        let hinge = (gamma + log_neg - log_pos).max(0.0);
        if !log_pos.is_finite() || !hinge.is_finite() {
            return Err(TrainError::NonFinite { index: i });
        }
        pos_sum += -log_pos;
        hinge_sum += hinge;
        if hinge > 0.0 {
            violations += 1;
        }
    }
    let generative_nll = pos_sum / n;
    let contrastive_margin = hinge_sum / n;
    let total = alpha * generative_nll + (1.0 - alpha) * contrastive_margin;
    if !total.is_finite() {
        return Err(TrainError::NonFinite { index: 0 });
    }
    Ok(LossBreakdown {
        total,
        generative_nll,
        contrastive_margin,
        margin_violation_rate: violations as f64 / n,
    })
}

/// One Adam step with decoupled weight decay and simplex re-projection.
///
/// Decay multiplies the decayed groups by (1 - lr·weight_decay) before the
/// moment update; afterwards every sum node's log-weight block is shifted by
/// its logsumexp so the stored weights sum to one exactly.
pub fn adam_step(
    params: &mut [f64],
    layout: &ParamLayout,
    grads: &GradientBundle,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), layout.total);
    assert_eq!(grads.flat().len(), layout.total);
    if weight_decay != 0.0 {
        let shrink = 1.0 - lr * weight_decay;
        for group in &layout.groups {
            if group.kind.weight_decayed() {
                for p in &mut params[group.offset..group.offset + group.len] {
                    *p *= shrink;
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let g = grads.flat();
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    for &(off, len) in &layout.sum_ranges {
        let lse = logsumexp(&params[off..off + len]);
        // Skip the no-op projection so untouched weights stay bit-identical.
        if lse.abs() > 1e-12 {
            for w in &mut params[off..off + len] {
                *w -= lse;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tape recording of the full forward pass
// ---------------------------------------------------------------------------

struct BottleneckSlots {
    w1: SlotId,
    b1: SlotId,
    w2: SlotId,
    b2: SlotId,
    d_llm: usize,
    hidden_mid: usize,
    d_pc: usize,
}

struct CircuitSlots {
    sig_g: Vec<SlotId>,
    log_w: Vec<SlotId>,
    mu: Vec<SlotId>,
    log_s: Vec<SlotId>,
    raw_nu: Vec<SlotId>,
    sum_w: Vec<SlotId>,
}

fn record_prelude(
    tape: &mut Tape,
    circuit: &CircuitGraph,
    bottleneck: &Bottleneck,
    flat: &[f64],
    layout: &ParamLayout,
) -> (BottleneckSlots, CircuitSlots) {
    let bn = BottleneckSlots {
        w1: tape.param(flat, layout, BN_W1),
        b1: tape.param(flat, layout, BN_B1),
        w2: tape.param(flat, layout, BN_W2),
        b2: tape.param(flat, layout, BN_B2),
        d_llm: bottleneck.d_llm(),
        hidden_mid: bottleneck.hidden_mid(),
        d_pc: bottleneck.d_pc(),
    };
    let g_all = tape.param(flat, layout, LEAF_G);
    let w_all = tape.param(flat, layout, LEAF_W);
    let mu_all = tape.param(flat, layout, LEAF_MU);
    let ls_all = tape.param(flat, layout, LEAF_LOG_S);
    let rn_all = tape.param(flat, layout, LEAF_RAW_NU);
    let sw_all = tape.param(flat, layout, SUM_LOG_W);

    let n_leaves = layout.n_leaves;
    let mut cs = CircuitSlots {
        sig_g: Vec::with_capacity(n_leaves),
        log_w: Vec::with_capacity(n_leaves),
        mu: Vec::with_capacity(n_leaves),
        log_s: Vec::with_capacity(n_leaves),
        raw_nu: Vec::with_capacity(n_leaves),
        sum_w: Vec::new(),
    };
    let mut leaf = 0usize;
    let mut sum_off = 0usize;
    for node in &circuit.nodes {
        match node {
            NodeKind::Leaf { .. } => {
                let g = tape.index(g_all, leaf);
                cs.sig_g.push(tape.sigmoid(g));
                let w = tape.slice(w_all, 3 * leaf, 3);
                cs.log_w.push(tape.log_softmax(w));
                cs.mu.push(tape.index(mu_all, leaf));
                cs.log_s.push(tape.index(ls_all, leaf));
                cs.raw_nu.push(tape.index(rn_all, leaf));
                leaf += 1;
            }
            NodeKind::Sum { log_weights, .. } => {
                cs.sum_w.push(tape.slice(sw_all, sum_off, log_weights.len()));
                sum_off += log_weights.len();
            }
            NodeKind::Product { .. } => {}
        }
    }
    (bn, cs)
}

fn record_project(tape: &mut Tape, bn: &BottleneckSlots, h: SlotId) -> SlotId {
    let mid = tape.matvec(bn.w1, h, bn.hidden_mid, bn.d_llm);
    let midb = tape.add(mid, bn.b1);
    let r = tape.relu(midb);
    let out = tape.matvec(bn.w2, r, bn.d_pc, bn.hidden_mid);
    tape.add(out, bn.b2)
}

fn record_log_density(
    tape: &mut Tape,
    circuit: &CircuitGraph,
    cs: &CircuitSlots,
    z: SlotId,
) -> SlotId {
    let mut z_dims: Vec<Option<SlotId>> = vec![None; circuit.num_dims];
    let mut vals: Vec<SlotId> = Vec::with_capacity(circuit.nodes.len());
    let mut leaf = 0usize;
    let mut sum_idx = 0usize;
    let mut kids: Vec<SlotId> = Vec::new();
    for node in &circuit.nodes {
        let slot = match node {
            NodeKind::Leaf { dim, .. } => {
                let zi = *z_dims[*dim].get_or_insert_with(|| tape.index(z, *dim));
                let gp = tape.gaussian_log_pdf(zi, cs.mu[leaf], cs.log_s[leaf]);
                let lp = tape.laplace_log_pdf(zi, cs.mu[leaf], cs.log_s[leaf]);
                let tp = tape.student_t_log_pdf(zi, cs.mu[leaf], cs.log_s[leaf], cs.raw_nu[leaf]);
                let cat = tape.concat(&[gp, lp, tp]);
                let scored = tape.add(cat, cs.log_w[leaf]);
                let mix = tape.logsumexp(scored);
                let out = tape.mul(cs.sig_g[leaf], mix);
                leaf += 1;
                out
            }
            NodeKind::Sum { children, .. } => {
                kids.clear();
                kids.extend(children.iter().map(|c| vals[c.index()]));
                let cat = tape.concat(&kids);
                let weighted = tape.add(cat, cs.sum_w[sum_idx]);
                sum_idx += 1;
                tape.logsumexp(weighted)
            }
            NodeKind::Product { children } => {
                kids.clear();
                kids.extend(children.iter().map(|c| vals[c.index()]));
                let cat = tape.concat(&kids);
                tape.sum_vec(cat)
            }
        };
        vals.push(slot);
    }
    vals[circuit.root.index()]
}

/// Record the composite loss for a batch; returns the loss slot and the
/// per-pair (log C(z⁺), hinge) slots for statistics.
#[allow(clippy::too_many_arguments)]
fn record_loss(
    tape: &mut Tape,
    circuit: &CircuitGraph,
    bottleneck: &Bottleneck,
    flat: &[f64],
    layout: &ParamLayout,
    pos: &[&[f64]],
    neg: &[&[f64]],
    alpha: f64,
    gamma: f64,
) -> (SlotId, Vec<SlotId>, Vec<SlotId>, Vec<SlotId>) {
    let (bn, cs) = record_prelude(tape, circuit, bottleneck, flat, layout);
    let n = pos.len();
    let mut pos_slots = Vec::with_capacity(n);
    let mut neg_slots = Vec::with_capacity(n);
    let mut hinge_slots = Vec::with_capacity(n);
    for i in 0..n {
        let hp = tape.input(pos[i]);
        let zp = record_project(tape, &bn, hp);
        let lp = record_log_density(tape, circuit, &cs, zp);
        pos_slots.push(lp);
        let hn = tape.input(neg[i]);
        let zn = record_project(tape, &bn, hn);
        let ln = record_log_density(tape, circuit, &cs, zn);
        neg_slots.push(ln);
        let diff = tape.sub(ln, lp);
        let shifted = tape.add_const(diff, gamma);
        hinge_slots.push(tape.relu(shifted));
    }
    let pos_cat = tape.concat(&pos_slots);
    let pos_sum = tape.sum_vec(pos_cat);
    let hinge_cat = tape.concat(&hinge_slots);
    let hinge_sum = tape.sum_vec(hinge_cat);
    let gen_term = tape.scale(pos_sum, -alpha / n as f64);
    let margin_term = tape.scale(hinge_sum, (1.0 - alpha) / n as f64);
    let loss = tape.add(gen_term, margin_term);
    (loss, pos_slots, neg_slots, hinge_slots)
}

/// Loss and exact gradients for one batch, computed through the tape.
/// Exposed for gradient-fidelity checks.
pub fn loss_gradients(
    circuit: &CircuitGraph,
    bottleneck: &Bottleneck,
    batch: &PairedBatch,
    alpha: f64,
    gamma: f64,
) -> Result<(LossBreakdown, GradientBundle), TrainError> {
    batch.check()?;
    let (flat, layout) = flatten_params(circuit, bottleneck);
    let pos: Vec<&[f64]> = batch.h_pos.iter().map(|h| h.as_slice()).collect();
    let neg: Vec<&[f64]> = batch.h_neg.iter().map(|h| h.as_slice()).collect();
    let mut tape = Tape::new();
    let (loss, pos_slots, _neg_slots, hinge_slots) = record_loss(
        &mut tape, circuit, bottleneck, &flat, &layout, &pos, &neg, alpha, gamma,
    );
    let breakdown = batch_breakdown(&tape, loss, &pos_slots, &hinge_slots);
    let bundle = tape.backward(loss, &layout)?;
    Ok((breakdown, bundle))
}

fn batch_breakdown(
    tape: &Tape,
    loss: SlotId,
    pos_slots: &[SlotId],
    hinge_slots: &[SlotId],
) -> LossBreakdown {
    let n = pos_slots.len() as f64;
    let pos_nll: f64 = pos_slots.iter().map(|&s| -tape.scalar(s)).sum::<f64>() / n;
    let hinge_mean: f64 = hinge_slots.iter().map(|&s| tape.scalar(s)).sum::<f64>() / n;
    let violations = hinge_slots
        .iter()
        .filter(|&&s| tape.scalar(s) > 0.0)
        .count() as f64;
    LossBreakdown {
        total: tape.scalar(loss),
        generative_nll: pos_nll,
        contrastive_margin: hinge_mean,
        margin_violation_rate: violations / n,
    }
}

/// Full training loop. Mutates `circuit` and `bottleneck` in place; on
/// divergence the parameters are rolled back to the last finite step and
/// `diverged_at` is set.
pub fn train(
    circuit: &mut CircuitGraph,
    bottleneck: &mut Bottleneck,
    data: &PairedBatch,
    config: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    config.check()?;
    data.check()?;
    let (mut flat, layout) = flatten_params(circuit, bottleneck);
    let mut prev = flat.clone();
    let mut adam = AdamState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tape = Tape::new();
    let n = data.len();
    let mut history = Vec::with_capacity(config.epochs);
    let mut grad_norms = Vec::new();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        // Independent shuffles re-pair positives and negatives each epoch.
        let mut pos_order: Vec<usize> = (0..n).collect();
        let mut neg_order: Vec<usize> = (0..n).collect();
        pos_order.shuffle(&mut rng);
        neg_order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut pos_sum = 0.0;
        let mut neg_sum = 0.0;
        let mut violation_sum = 0.0;

        for chunk_start in (0..n).step_by(config.batch_size) {
            let end = (chunk_start + config.batch_size).min(n);
            let bsz = end - chunk_start;
            let pos: Vec<&[f64]> = pos_order[chunk_start..end]
                .iter()
                .map(|&i| data.h_pos[i].as_slice())
                .collect();
            let neg: Vec<&[f64]> = neg_order[chunk_start..end]
                .iter()
                .map(|&i| data.h_neg[i].as_slice())
                .collect();

            tape.clear();
            let (loss, pos_slots, neg_slots, hinge_slots) = record_loss(
                &mut tape, circuit, bottleneck, &flat, &layout, &pos, &neg, config.alpha,
                config.gamma,
            );
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                flat.copy_from_slice(&prev);
                write_back(&flat, &layout, circuit, bottleneck);
                return Ok(TrainResult {
                    history,
                    grad_norms,
                    diverged_at: Some(step),
                });
            }
            let breakdown = batch_breakdown(&tape, loss, &pos_slots, &hinge_slots);
            loss_sum += breakdown.total * bsz as f64;
            pos_sum += breakdown.generative_nll * bsz as f64;
            neg_sum += neg_slots.iter().map(|&s| -tape.scalar(s)).sum::<f64>();
            violation_sum += breakdown.margin_violation_rate * bsz as f64;

            let bundle = match tape.backward(loss, &layout) {
                Ok(b) => b,
                Err(_) => {
                    flat.copy_from_slice(&prev);
                    write_back(&flat, &layout, circuit, bottleneck);
                    return Ok(TrainResult {
                        history,
                        grad_norms,
                        diverged_at: Some(step),
                    });
                }
            };
            let bundle = clip_global_norm(bundle, config.clip_norm);
            grad_norms.push(bundle.norm);

            prev.copy_from_slice(&flat);
            adam_step(
                &mut flat,
                &layout,
                &bundle,
                &mut adam,
                config.lr,
                config.weight_decay,
            );
            step += 1;
        }

        history.push(EpochStats {
            epoch: epoch + 1,
            total_loss: loss_sum / n as f64,
            pos_nll: pos_sum / n as f64,
            neg_nll: neg_sum / n as f64,
            margin_violation_rate: violation_sum / n as f64,
        });
    }

    write_back(&flat, &layout, circuit, bottleneck);
    Ok(TrainResult {
        history,
        grad_norms,
        diverged_at: None,
    })
}

/// Loss history as CSV with a fixed header, one row per epoch.
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,total_loss,pos_nll,neg_nll,margin_violation_rate\n");
    for e in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.total_loss, e.pos_nll, e.neg_nll, e.margin_violation_rate
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bottleneck::init_bottleneck;
    use crate::circuit::build_random_circuit;
    use crate::math::Matrix;

    fn tiny_setup(seed: u64) -> (CircuitGraph, Bottleneck) {
        let circuit = build_random_circuit(3, 2, 2, seed).unwrap();
        let bottleneck = init_bottleneck(5, 6, 3, seed + 1);
        (circuit, bottleneck)
    }

    fn tiny_batch(seed: u64, n: usize, d: usize) -> PairedBatch {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut sample = |shift: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0) + shift).collect())
                .collect()
        };
        PairedBatch {
            h_pos: sample(0.0),
            h_neg: sample(2.0),
        }
    }

    #[test]
    fn alpha_one_is_exactly_the_mean_positive_nll() {
        let (c, b) = tiny_setup(42);
        let batch = tiny_batch(0, 4, 5);
        let l = composite_loss(&c, &b, &batch, 1.0, 5.0).unwrap();
        assert_eq!(l.total, l.generative_nll);
        // The contrastive term is still reported.
        assert!(l.contrastive_margin.is_finite());
    }

    #[test]
    fn satisfied_margin_contributes_exactly_zero() {
        // Identity-ish bottleneck: z = relu(h). Positive at the Gaussian
        // mode, negative far in the tail; gap >> γ.
        let circuit = CircuitGraph {
            nodes: vec![crate::circuit::NodeKind::Leaf {
                dim: 0,
                params: crate::circuit::LeafParams::from_constrained(
                    20.0,
                    [1.0, 0.0, 0.0],
                    0.0,
                    1.0,
                    5.0,
                ),
            }],
            root: crate::circuit::NodeId(0),
            num_dims: 1,
            depth: 1,
            branching: 2,
            seed: 0,
        };
        let eye = Matrix::from_vec(1, 1, vec![1.0]);
        let bottleneck = Bottleneck {
            w1: eye.clone(),
            b1: vec![0.0],
            w2: eye,
            b2: vec![0.0],
        };
        let batch = PairedBatch {
            h_pos: vec![vec![0.0]],
            h_neg: vec![vec![10.0]],
        };
        let l = composite_loss(&circuit, &bottleneck, &batch, 0.3, 5.0).unwrap();
        assert_eq!(l.contrastive_margin, 0.0);
        assert_eq!(l.margin_violation_rate, 0.0);
        assert_eq!(l.total, 0.3 * l.generative_nll);
    }

    #[test]
    fn tape_loss_matches_direct_loss() {
        let (c, b) = tiny_setup(7);
        let batch = tiny_batch(3, 6, 5);
        let direct = composite_loss(&c, &b, &batch, 0.8, 5.0).unwrap();
        let (taped, _) = loss_gradients(&c, &b, &batch, 0.8, 5.0).unwrap();
        assert!((direct.total - taped.total).abs() < 1e-9);
        assert!((direct.generative_nll - taped.generative_nll).abs() < 1e-9);
        assert!((direct.contrastive_margin - taped.contrastive_margin).abs() < 1e-9);
        assert_eq!(direct.margin_violation_rate, taped.margin_violation_rate);
    }

    #[test]
    fn adam_zero_grads_leave_parameters_unchanged() {
        let (c, b) = tiny_setup(1);
        let (mut flat, layout) = flatten_params(&c, &b);
        let before = flat.clone();
        let grads = GradientBundle::zeros(&layout);
        let mut state = AdamState::new(flat.len());
        adam_step(&mut flat, &layout, &grads, &mut state, 0.1, 0.0);
        assert_eq!(flat, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        use crate::params::{GroupKind, ParamGroup};
        let layout = ParamLayout {
            groups: vec![ParamGroup {
                name: "p",
                kind: GroupKind::BottleneckBias,
                offset: 0,
                len: 1,
            }],
            sum_ranges: vec![],
            total: 1,
            n_leaves: 0,
        };
        let mut params = vec![1.0];
        let mut g = GradientBundle::zeros(&layout);
        g.flat_mut()[0] = 1.0;
        g.recompute_norm();
        let mut state = AdamState::new(1);
        adam_step(&mut params, &layout, &g, &mut state, 0.1, 0.0);
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((params[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_reference_trace_on_a_quadratic() {
        use crate::params::{GroupKind, ParamGroup};
        // Reference implementation, written independently of adam_step.
        struct Ref {
            m: f64,
            v: f64,
            t: i32,
        }
        impl Ref {
            fn update(&mut self, p: f64, g: f64, lr: f64) -> f64 {
                self.t += 1;
                self.m = 0.9 * self.m + 0.1 * g;
                self.v = 0.999 * self.v + 0.001 * g * g;
                let mh = self.m / (1.0 - 0.9f64.powi(self.t));
                let vh = self.v / (1.0 - 0.999f64.powi(self.t));
                p - lr * mh / (vh.sqrt() + 1e-8)
            }
        }
        let layout = ParamLayout {
            groups: vec![ParamGroup {
                name: "p",
                kind: GroupKind::BottleneckBias,
                offset: 0,
                len: 1,
            }],
            sum_ranges: vec![],
            total: 1,
            n_leaves: 0,
        };
        let mut params = vec![2.0];
        let mut state = AdamState::new(1);
        let mut reference = Ref { m: 0.0, v: 0.0, t: 0 };
        let mut ref_p = 2.0;
        for _ in 0..3 {
            // Quadratic loss 0.5·p²: gradient = p.
            let mut g = GradientBundle::zeros(&layout);
            g.flat_mut()[0] = params[0];
            g.recompute_norm();
            let ref_g = ref_p;
            adam_step(&mut params, &layout, &g, &mut state, 0.05, 0.0);
            ref_p = reference.update(ref_p, ref_g, 0.05);
            assert!((params[0] - ref_p).abs() < 1e-9, "{} vs {ref_p}", params[0]);
        }
    }

    #[test]
    fn zero_learning_rate_preserves_initialization() {
        let (mut c, mut b) = tiny_setup(5);
        let c0 = c.clone();
        let b0 = b.clone();
        let batch = tiny_batch(9, 4, 5);
        let config = TrainConfig {
            epochs: 1,
            lr: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let res = train(&mut c, &mut b, &batch, &config).unwrap();
        assert!(res.diverged_at.is_none());
        assert_eq!(c, c0);
        assert_eq!(b, b0);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let batch = tiny_batch(11, 10, 5);
        let run = || {
            let (mut c, mut b) = tiny_setup(3);
            let config = TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            };
            train(&mut c, &mut b, &batch, &config).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.total_loss.to_bits(), y.total_loss.to_bits());
            assert_eq!(x.pos_nll.to_bits(), y.pos_nll.to_bits());
        }
    }

    #[test]
    fn sum_weights_stay_normalized_through_training() {
        let (mut c, mut b) = tiny_setup(13);
        let batch = tiny_batch(17, 8, 5);
        let config = TrainConfig {
            epochs: 4,
            ..TrainConfig::default()
        };
        train(&mut c, &mut b, &batch, &config).unwrap();
        assert!(crate::circuit::validate(&c).is_empty());
    }

    #[test]
    fn gradient_norms_respect_the_clip_bound() {
        let (mut c, mut b) = tiny_setup(19);
        let batch = tiny_batch(23, 8, 5);
        let config = TrainConfig {
            epochs: 2,
            clip_norm: 0.5,
            ..TrainConfig::default()
        };
        let res = train(&mut c, &mut b, &batch, &config).unwrap();
        assert!(!res.grad_norms.is_empty());
        for n in res.grad_norms {
            assert!(n <= 0.5 + 1e-9);
        }
    }

    #[test]
    fn invalid_config_is_rejected_with_the_field_name() {
        let bad = TrainConfig {
            alpha: 1.5,
            ..TrainConfig::default()
        };
        match bad.check() {
            Err(TrainError::InvalidConfig { field, .. }) => assert_eq!(field, "alpha"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn csv_has_header_and_one_row_per_epoch() {
        let history = vec![
            EpochStats {
                epoch: 1,
                total_loss: 1.5,
                pos_nll: 2.0,
                neg_nll: 3.0,
                margin_violation_rate: 0.25,
            },
            EpochStats {
                epoch: 2,
                total_loss: 1.2,
                pos_nll: 1.9,
                neg_nll: 3.3,
                margin_violation_rate: 0.0,
            },
        ];
        let csv = history_to_csv(&history);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,total_loss,pos_nll,neg_nll,margin_violation_rate");
        assert!(lines[1].starts_with("1,1.5,2,3,0.25"));
    }
}
