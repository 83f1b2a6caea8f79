//! Structural validators: smoothness, decomposability, weight normalization,
//! topological order, and scope coverage. Violations are data, not errors;
//! each one names the offending node (or dimension).

use super::{CircuitGraph, NodeId, NodeKind, Scope};

const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// A child id does not precede its parent in the node list.
    TopologicalOrder { node: NodeId, child: NodeId },
    /// Sum or product node with no children.
    EmptyChildren { node: NodeId },
    /// Sum node whose weight count differs from its child count.
    WeightArity { node: NodeId, children: usize, weights: usize },
    /// Sum-node weights do not sum to 1 after exponentiation.
    WeightNormalization { node: NodeId, total: f64 },
    /// NaN or +inf stored log-weight.
    InvalidWeight { node: NodeId },
    /// Sum node whose children do not all share one scope.
    Smoothness { node: NodeId, child: NodeId },
    /// Product node with overlapping child scopes.
    Decomposability { node: NodeId, child: NodeId },
    /// Leaf referencing a dimension outside 0..num_dims.
    LeafDimRange { node: NodeId, dim: usize },
    /// Non-finite raw leaf parameter.
    LeafParams { node: NodeId },
    /// Root scope is not the full dimension set.
    RootScope { node: NodeId },
    /// A dimension reached by no leaf.
    UncoveredDimension { dim: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::TopologicalOrder { node, child } => {
                write!(f, "node {node}: child {child} does not precede it")
            }
            Violation::EmptyChildren { node } => write!(f, "node {node}: no children"),
            Violation::WeightArity { node, children, weights } => write!(
                f,
                "sum node {node}: {children} children but {weights} weights"
            ),
            Violation::WeightNormalization { node, total } => write!(
                f,
                "sum node {node}: weights sum to {total}, expected 1 within {WEIGHT_TOL}"
            ),
            Violation::InvalidWeight { node } => {
                write!(f, "sum node {node}: NaN or +inf log-weight")
            }
            Violation::Smoothness { node, child } => write!(
                f,
                "sum node {node}: child {child} has a different scope (smoothness)"
            ),
            Violation::Decomposability { node, child } => write!(
                f,
                "product node {node}: child {child} overlaps earlier children (decomposability)"
            ),
            Violation::LeafDimRange { node, dim } => {
                write!(f, "leaf {node}: dimension {dim} out of range")
            }
            Violation::LeafParams { node } => write!(f, "leaf {node}: non-finite parameters"),
            Violation::RootScope { node } => {
                write!(f, "root {node}: scope does not cover all dimensions")
            }
            Violation::UncoveredDimension { dim } => {
                write!(f, "dimension {dim} appears in no leaf")
            }
        }
    }
}

/// Check every structural invariant. Empty result means the circuit is a
/// valid smooth, decomposable PC with normalized sum weights.
pub fn validate(circuit: &CircuitGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = circuit.nodes.len();
    let nd = circuit.num_dims;
    let mut scopes: Vec<Scope> = Vec::with_capacity(n);
    let mut covered = vec![false; nd];

    for (i, node) in circuit.nodes.iter().enumerate() {
        let id = NodeId(i as u32);
        let mut order_ok = true;
        for &c in node.children() {
            if c.index() >= i {
                out.push(Violation::TopologicalOrder { node: id, child: c });
                order_ok = false;
            }
        }
        match node {
            NodeKind::Leaf { dim, params } => {
                if *dim >= nd {
                    out.push(Violation::LeafDimRange { node: id, dim: *dim });
                    scopes.push(Scope::empty(nd));
                } else {
                    covered[*dim] = true;
                    scopes.push(Scope::singleton(nd, *dim));
                }
                if !params.all_finite() {
                    out.push(Violation::LeafParams { node: id });
                }
            }
            NodeKind::Sum { children, log_weights } => {
                if children.is_empty() {
                    out.push(Violation::EmptyChildren { node: id });
                }
                if children.len() != log_weights.len() {
                    out.push(Violation::WeightArity {
                        node: id,
                        children: children.len(),
                        weights: log_weights.len(),
                    });
                }
                if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
                    out.push(Violation::InvalidWeight { node: id });
                } else if !log_weights.is_empty() {
                    let total: f64 = log_weights.iter().map(|w| w.exp()).sum();
                    if (total - 1.0).abs() > WEIGHT_TOL {
                        out.push(Violation::WeightNormalization { node: id, total });
                    }
                }
                let mut scope = Scope::empty(nd);
                if order_ok {
                    if let Some((&first, rest)) = children.split_first() {
                        scope = scopes[first.index()].clone();
                        for &c in rest {
                            if scopes[c.index()] != scope {
                                out.push(Violation::Smoothness { node: id, child: c });
                            }
                        }
                    }
                }
                scopes.push(scope);
            }
            NodeKind::Product { children } => {
                if children.is_empty() {
                    out.push(Violation::EmptyChildren { node: id });
                }
                let mut scope = Scope::empty(nd);
                if order_ok {
                    for &c in children {
                        let cs = &scopes[c.index()];
                        if scope.intersects(cs) {
                            out.push(Violation::Decomposability { node: id, child: c });
                        }
                        scope.union_with(cs);
                    }
                }
                scopes.push(scope);
            }
        }
    }

    if circuit.root.index() < n && scopes[circuit.root.index()] != Scope::full(nd) {
        out.push(Violation::RootScope { node: circuit.root });
    }
    for (dim, seen) in covered.iter().enumerate() {
        if !seen {
            out.push(Violation::UncoveredDimension { dim });
        }
    }
    out
}
