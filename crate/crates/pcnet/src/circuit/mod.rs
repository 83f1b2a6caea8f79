//! Probabilistic circuit over a low-dimensional latent space.
//!
//! The circuit is a rooted DAG of leaf, sum, and product nodes stored in
//! topological order (children strictly before parents). Under smoothness
//! (sum children share a scope) and decomposability (product children have
//! pairwise-disjoint scopes) the root value is computed exactly in one
//! linear-time bottom-up pass, entirely in log-space.
//!
//! Each leaf models one latent dimension with a gated heterogeneous mixture:
//!
//! ```text
//!   leaf(z_i) = σ(g) · log Σ_k w_k exp(log P_k(z_i | μ, s, ν)),
//!   k ∈ {Gaussian, Laplace, Student-T}
//! ```
//!
//! μ and s are shared across the three components; ν belongs to the
//! Student-T alone. Positivity constraints are enforced by parameterization
//! (s = exp(log_s), ν = 1 + softplus(raw_nu)) rather than clamping, so the
//! raw parameters are free reals throughout optimization.

mod build;
mod validate;

pub use build::{build_random_circuit, BuildError};
pub use validate::{validate, Violation};

use crate::math::{ln_gamma, logsumexp, sigmoid, softplus, LN_2PI};
use thiserror::Error;

/// Index of a node inside [`CircuitGraph::nodes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Raw (unconstrained) parameters of a heterogeneous mixture leaf.
///
/// `w_logits` are normalized on evaluation via log-softmax; `log_s` and
/// `raw_nu` keep s > 0 and ν > 1 for any real-valued setting.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafParams {
    /// Gate logit; σ(g) scales the leaf's log-density contribution.
    pub g: f64,
    /// Mixture-weight logits over {Gaussian, Laplace, Student-T}.
    pub w_logits: [f64; 3],
    /// Shared location.
    pub mu: f64,
    /// Shared scale, stored as ln s.
    pub log_s: f64,
    /// Student-T degrees of freedom, stored so that ν = 1 + softplus(raw_nu).
    pub raw_nu: f64,
}

impl LeafParams {
    /// Standard leaf used at construction time: gate open at σ(0)=1/2 only
    /// after training moves it, uniform component weights, unit scale, ν=5.
    pub fn new(g: f64, w_logits: [f64; 3], mu: f64, log_s: f64, raw_nu: f64) -> Self {
        LeafParams {
            g,
            w_logits,
            mu,
            log_s,
            raw_nu,
        }
    }

    /// Convenience constructor from constrained values.
    pub fn from_constrained(g: f64, weights: [f64; 3], mu: f64, s: f64, nu: f64) -> Self {
        assert!(s > 0.0, "scale must be positive");
        assert!(nu > 1.0, "degrees of freedom must exceed 1");
        let w_logits = [
            weights[0].max(1e-300).ln(),
            weights[1].max(1e-300).ln(),
            weights[2].max(1e-300).ln(),
        ];
        LeafParams {
            g,
            w_logits,
            mu,
            log_s: s.ln(),
            raw_nu: crate::math::softplus_inv(nu - 1.0),
        }
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        self.log_s.exp()
    }

    #[inline]
    pub fn nu(&self) -> f64 {
        1.0 + softplus(self.raw_nu)
    }

    /// Normalized log mixture weights.
    pub fn log_weights(&self) -> [f64; 3] {
        let lse = logsumexp(&self.w_logits);
        [
            self.w_logits[0] - lse,
            self.w_logits[1] - lse,
            self.w_logits[2] - lse,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.g.is_finite()
            && self.mu.is_finite()
            && self.log_s.is_finite()
            && self.raw_nu.is_finite()
            // -inf logits encode removed components and are allowed.
            && self.w_logits.iter().all(|w| !w.is_nan() && *w != f64::INFINITY)
    }
}

/// One circuit node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Leaf { dim: usize, params: LeafParams },
    Sum { children: Vec<NodeId>, log_weights: Vec<f64> },
    Product { children: Vec<NodeId> },
}

impl NodeKind {
    pub fn children(&self) -> &[NodeId] {
        match self {
            NodeKind::Leaf { .. } => &[],
            NodeKind::Sum { children, .. } => children,
            NodeKind::Product { children } => children,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            NodeKind::Leaf { .. } => "leaf",
            NodeKind::Sum { .. } => "sum",
            NodeKind::Product { .. } => "product",
        }
    }
}

/// Layered DAG with nodes in topological order (children before parents).
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitGraph {
    pub nodes: Vec<NodeKind>,
    pub root: NodeId,
    pub num_dims: usize,
    pub depth: usize,
    pub branching: usize,
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum CircuitError {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("input has {got} dimensions, circuit expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("NaN encountered at node {node} during evaluation")]
    NanAtNode { node: NodeId },
}

/// Log-density of one heterogeneous mixture leaf at a scalar input.
///
/// Never exponentiates raw densities: the three component log-pdfs are
/// combined with a max-subtracted logsumexp and the gate multiplies the
/// resulting log value.
pub fn leaf_log_density(params: &LeafParams, z_i: f64) -> Result<f64, CircuitError> {
    if !z_i.is_finite() {
        return Err(CircuitError::NonFiniteInput);
    }
    let lw = params.log_weights();
    let scores = [
        lw[0] + gaussian_log_pdf(z_i, params.mu, params.log_s),
        lw[1] + laplace_log_pdf(z_i, params.mu, params.log_s),
        lw[2] + student_t_log_pdf(z_i, params.mu, params.log_s, params.raw_nu),
    ];
    let mix = logsumexp(&scores);
    let gate = sigmoid(params.g);
    // 0 · (-inf) would be NaN; a fully closed gate contributes exactly 0.
    if gate == 0.0 {
        return Ok(0.0);
    }
    Ok(gate * mix)
}

/// ln N(z | μ, s²) with s = exp(log_s).
#[inline]
pub fn gaussian_log_pdf(z: f64, mu: f64, log_s: f64) -> f64 {
    let t = (z - mu) / log_s.exp();
    -0.5 * LN_2PI - log_s - 0.5 * t * t
}

/// ln Laplace(z | μ, s) with s = exp(log_s).
#[inline]
pub fn laplace_log_pdf(z: f64, mu: f64, log_s: f64) -> f64 {
    let t = (z - mu) / log_s.exp();
    -std::f64::consts::LN_2 - log_s - t.abs()
}

/// ln of the location-scale Student-T pdf: (1/s)·t_ν((z-μ)/s),
/// ν = 1 + softplus(raw_nu).
#[inline]
pub fn student_t_log_pdf(z: f64, mu: f64, log_s: f64, raw_nu: f64) -> f64 {
    let nu = 1.0 + softplus(raw_nu);
    let t = (z - mu) / log_s.exp();
    ln_gamma(0.5 * (nu + 1.0))
        - ln_gamma(0.5 * nu)
        - 0.5 * (nu * std::f64::consts::PI).ln()
        - log_s
        - 0.5 * (nu + 1.0) * (t * t / nu).ln_1p()
}

/// Per-evaluation statistics for the linear-time guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalStats {
    pub node_evaluations: usize,
}

impl CircuitGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Exact log C_root(z) in a single bottom-up pass.
    pub fn log_density(&self, z: &[f64]) -> Result<f64, CircuitError> {
        self.log_density_traced(z).map(|(v, _)| v)
    }

    /// As [`log_density`](Self::log_density), also reporting how many node
    /// evaluations the pass performed (always exactly one per node).
    pub fn log_density_traced(&self, z: &[f64]) -> Result<(f64, EvalStats), CircuitError> {
        if z.len() != self.num_dims {
            return Err(CircuitError::DimensionMismatch {
                expected: self.num_dims,
                got: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CircuitError::NonFiniteInput);
        }
        let mut vals = vec![0.0f64; self.nodes.len()];
        let mut scores = Vec::with_capacity(self.branching.max(4));
        let mut evals = 0usize;
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match node {
                NodeKind::Leaf { dim, params } => leaf_log_density(params, z[*dim])?,
                NodeKind::Sum {
                    children,
                    log_weights,
                } => {
                    scores.clear();
                    for (c, lw) in children.iter().zip(log_weights) {
                        scores.push(lw + vals[c.index()]);
                    }
                    logsumexp(&scores)
                }
                NodeKind::Product { children } => {
                    children.iter().map(|c| vals[c.index()]).sum()
                }
            };
            evals += 1;
            if v.is_nan() {
                return Err(CircuitError::NanAtNode {
                    node: NodeId(i as u32),
                });
            }
            vals[i] = v;
        }
        Ok((
            vals[self.root.index()],
            EvalStats {
                node_evaluations: evals,
            },
        ))
    }

    pub fn leaves(&self) -> impl Iterator<Item = (NodeId, &LeafParams)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n {
            NodeKind::Leaf { params, .. } => Some((NodeId(i as u32), params)),
            _ => None,
        })
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves().count()
    }
}

/// Dimension-set bitmask used by the builder and the validators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scope {
    words: Vec<u64>,
}

impl Scope {
    pub fn empty(num_dims: usize) -> Self {
        Scope {
            words: vec![0; num_dims.div_ceil(64)],
        }
    }

    pub fn singleton(num_dims: usize, dim: usize) -> Self {
        let mut s = Scope::empty(num_dims);
        s.insert(dim);
        s
    }

    pub fn full(num_dims: usize) -> Self {
        let mut s = Scope::empty(num_dims);
        for d in 0..num_dims {
            s.insert(d);
        }
        s
    }

    pub fn insert(&mut self, dim: usize) {
        self.words[dim / 64] |= 1u64 << (dim % 64);
    }

    pub fn contains(&self, dim: usize) -> bool {
        self.words[dim / 64] & (1u64 << (dim % 64)) != 0
    }

    pub fn union_with(&mut self, other: &Scope) {
        for (w, o) in self.words.iter_mut().zip(&other.words) {
            *w |= o;
        }
    }

    pub fn intersects(&self, other: &Scope) -> bool {
        self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0)
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}
