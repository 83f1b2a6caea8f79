//! Randomized bottom-up circuit construction.
//!
//! Layers alternate starting from a product layer directly above the leaves
//! (level 1), so the root kind is determined by the parity of `depth`:
//! odd depth → product root, even depth → sum root.
//!
//! * A sum node at level ℓ mixes `branching` same-scope subtrees, each built
//!   with independent permutation randomness, with exactly uniform weights.
//! * A non-terminal product node at level ℓ ≥ 3 randomly permutes its scope
//!   and splits it into at most `branching` contiguous blocks of near-equal
//!   size, one child per block (decomposable by construction).
//! * The terminal product layer (level 1) factorizes its scope into one
//!   fresh leaf per dimension. Leaves are never shared between sum-layer
//!   replicas, so the total leaf count is `num_dims` times the product of
//!   the sum-layer branching factors above.
//!
//! Initial leaf parameters: g = 0, uniform component weights, μ ~ N(0, 0.1),
//! s = 1, ν = 5. Sum weights start exactly uniform.

use super::{CircuitGraph, LeafParams, NodeId, NodeKind};
use crate::math::{sample_standard_normal, softplus_inv};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BuildError {
    #[error("num_dims must be at least 1, got {0}")]
    NumDims(usize),
    #[error("depth must be at least 1, got {0}")]
    Depth(usize),
    #[error("branching must be at least 2, got {0}; a product layer cannot partition a scope into fewer than two blocks and a sum layer needs at least two children to mix")]
    Branching(usize),
}

struct Builder {
    nodes: Vec<NodeKind>,
    branching: usize,
    mu_std: f64,
    raw_nu_init: f64,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, node: NodeKind) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(node);
        id
    }

    fn leaf(&mut self, dim: usize) -> NodeId {
        let mu = self.mu_std * sample_standard_normal(&mut self.rng);
        let params = LeafParams::new(0.0, [0.0; 3], mu, 0.0, self.raw_nu_init);
        self.push(NodeKind::Leaf { dim, params })
    }

    /// Node over `scope` (sorted dims) at the given level; level 0 is a leaf.
    fn node(&mut self, scope: &[usize], level: usize) -> NodeId {
        if level == 0 {
            debug_assert_eq!(scope.len(), 1);
            return self.leaf(scope[0]);
        }
        if level % 2 == 1 {
            // Product layer.
            let children = if level == 1 {
                scope.iter().map(|&d| self.leaf(d)).collect()
            } else {
                let mut permuted = scope.to_vec();
                permuted.shuffle(&mut self.rng);
                let blocks = self.branching.min(permuted.len());
                let base = permuted.len() / blocks;
                let extra = permuted.len() % blocks;
                let mut children = Vec::with_capacity(blocks);
                let mut start = 0;
                for b in 0..blocks {
                    let len = base + usize::from(b < extra);
                    let mut block = permuted[start..start + len].to_vec();
                    block.sort_unstable();
                    start += len;
                    children.push(self.node(&block, level - 1));
                }
                children
            };
            self.push(NodeKind::Product { children })
        } else {
            // Sum layer: `branching` same-scope replicas, uniform weights.
            let children: Vec<NodeId> = (0..self.branching)
                .map(|_| self.node(scope, level - 1))
                .collect();
            let lw = -(self.branching as f64).ln();
            self.push(NodeKind::Sum {
                children,
                log_weights: vec![lw; self.branching],
            })
        }
    }
}

/// Build a random smooth, decomposable circuit over `num_dims` dimensions.
/// Deterministic for a fixed seed, including the node-id sequence.
pub fn build_random_circuit(
    num_dims: usize,
    depth: usize,
    branching: usize,
    rng_seed: u64,
) -> Result<CircuitGraph, BuildError> {
    if num_dims < 1 {
        return Err(BuildError::NumDims(num_dims));
    }
    if depth < 1 {
        return Err(BuildError::Depth(depth));
    }
    if branching < 2 {
        return Err(BuildError::Branching(branching));
    }
    let mut b = Builder {
        nodes: Vec::new(),
        branching,
        mu_std: 0.1,
        raw_nu_init: softplus_inv(4.0),
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
    };
    let full: Vec<usize> = (0..num_dims).collect();
    let root = b.node(&full, depth);
    Ok(CircuitGraph {
        nodes: b.nodes,
        root,
        num_dims,
        depth,
        branching,
        seed: rng_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::validate;

    #[test]
    fn minimal_circuit_is_a_product_over_two_leaves() {
        let c = build_random_circuit(2, 1, 2, 42).unwrap();
        assert_eq!(c.node_count(), 3);
        assert!(matches!(c.nodes[0], NodeKind::Leaf { dim: 0, .. }));
        assert!(matches!(c.nodes[1], NodeKind::Leaf { dim: 1, .. }));
        assert!(matches!(c.nodes[2], NodeKind::Product { .. }));
        assert_eq!(c.root, NodeId(2));
        assert!(validate(&c).is_empty());
    }

    #[test]
    fn default_configuration_builds_and_validates() {
        let c = build_random_circuit(128, 4, 3, 42).unwrap();
        assert!(validate(&c).is_empty(), "{:?}", validate(&c));
        // Sum layers at depths 4 and 2 each replicate 3x: 9 leaves per dim.
        assert_eq!(c.leaf_count(), 128 * 9);
        // Root sum, 3 products, 9 sums, 27 terminal products, 1152 leaves.
        assert_eq!(c.node_count(), 1 + 3 + 9 + 27 + 1152);
        assert!(matches!(c.nodes[c.root.index()], NodeKind::Sum { .. }));
    }

    #[test]
    fn construction_is_deterministic_per_seed() {
        let a = build_random_circuit(128, 4, 3, 42).unwrap();
        let b = build_random_circuit(128, 4, 3, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_changes_wiring() {
        let a = build_random_circuit(128, 4, 3, 42).unwrap();
        let b = build_random_circuit(128, 4, 3, 43).unwrap();
        assert!(validate(&b).is_empty());
        assert_eq!(a.node_count(), b.node_count());
        // Same shape, different scope partitions (and leaf locations).
        let dims = |c: &CircuitGraph| -> Vec<usize> {
            c.nodes
                .iter()
                .filter_map(|n| match n {
                    NodeKind::Leaf { dim, .. } => Some(*dim),
                    _ => None,
                })
                .collect()
        };
        assert_ne!(dims(&a), dims(&b));
    }

    #[test]
    fn degenerate_parameters_are_rejected() {
        assert_eq!(build_random_circuit(0, 1, 2, 0), Err(BuildError::NumDims(0)));
        assert_eq!(build_random_circuit(2, 0, 2, 0), Err(BuildError::Depth(0)));
        assert_eq!(
            build_random_circuit(2, 1, 1, 0),
            Err(BuildError::Branching(1))
        );
    }

    #[test]
    fn every_dimension_reaches_a_leaf_even_for_awkward_shapes() {
        for (d, l, b) in [(1, 1, 2), (1, 4, 3), (5, 2, 2), (7, 3, 4), (13, 5, 3)] {
            let c = build_random_circuit(d, l, b, 7).unwrap();
            assert!(validate(&c).is_empty(), "({d},{l},{b}): {:?}", validate(&c));
        }
    }

    #[test]
    fn initial_leaf_parameters_match_the_construction_contract() {
        let c = build_random_circuit(16, 2, 2, 42).unwrap();
        for (_, p) in c.leaves() {
            assert_eq!(p.g, 0.0);
            assert_eq!(p.w_logits, [0.0; 3]);
            assert_eq!(p.log_s, 0.0);
            assert!((p.nu() - 5.0).abs() < 1e-12);
            assert!(p.mu.abs() < 1.0, "mu draws are N(0, 0.1)");
        }
    }
}
