//! Flat parameter registry for joint circuit + bottleneck optimization.
//!
//! All trainable parameters live in one flat `Vec<f64>` described by a
//! [`ParamLayout`]: ten named groups (five leaf-parameter groups, the sum
//! log-weights, and the four bottleneck tensors). The layout records which
//! groups receive weight decay and where each sum node's log-weight block
//! sits so the simplex projection can run after every optimizer step.

use crate::bottleneck::Bottleneck;
use crate::circuit::{CircuitGraph, NodeKind};

/// Index of a parameter group in [`ParamLayout::groups`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

pub const LEAF_G: ParamId = ParamId(0);
pub const LEAF_W: ParamId = ParamId(1);
pub const LEAF_MU: ParamId = ParamId(2);
pub const LEAF_LOG_S: ParamId = ParamId(3);
pub const LEAF_RAW_NU: ParamId = ParamId(4);
pub const SUM_LOG_W: ParamId = ParamId(5);
pub const BN_W1: ParamId = ParamId(6);
pub const BN_B1: ParamId = ParamId(7);
pub const BN_W2: ParamId = ParamId(8);
pub const BN_B2: ParamId = ParamId(9);

pub const GROUP_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    /// Raw leaf parameters: decayed.
    LeafRaw,
    /// Sum-node log-weights: never decayed, re-normalized after each step.
    SumLogWeights,
    /// Bottleneck weight matrices: decayed.
    BottleneckWeight,
    /// Bottleneck biases: not decayed.
    BottleneckBias,
}

impl GroupKind {
    pub fn weight_decayed(self) -> bool {
        matches!(self, GroupKind::LeafRaw | GroupKind::BottleneckWeight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: &'static str,
    pub kind: GroupKind,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub groups: Vec<ParamGroup>,
    /// (offset, len) of each sum node's log-weight block, in flat coordinates.
    pub sum_ranges: Vec<(usize, usize)>,
    pub total: usize,
    pub n_leaves: usize,
}

impl ParamLayout {
    pub fn group(&self, id: ParamId) -> &ParamGroup {
        &self.groups[id.0]
    }

    pub fn span(&self, id: ParamId) -> std::ops::Range<usize> {
        let g = self.group(id);
        g.offset..g.offset + g.len
    }
}

/// Gather all parameters of a circuit + bottleneck pair into a flat vector.
pub fn flatten_params(circuit: &CircuitGraph, bottleneck: &Bottleneck) -> (Vec<f64>, ParamLayout) {
    let n_leaves = circuit.leaf_count();
    let n_sum_weights: usize = circuit
        .nodes
        .iter()
        .map(|n| match n {
            NodeKind::Sum { log_weights, .. } => log_weights.len(),
            _ => 0,
        })
        .sum();

    let mut groups = Vec::with_capacity(GROUP_COUNT);
    let mut offset = 0;
    let mut push = |name: &'static str, kind: GroupKind, len: usize| {
        groups.push(ParamGroup {
            name,
            kind,
            offset,
            len,
        });
        offset += len;
    };
    push("leaf_g", GroupKind::LeafRaw, n_leaves);
    push("leaf_w_logits", GroupKind::LeafRaw, 3 * n_leaves);
    push("leaf_mu", GroupKind::LeafRaw, n_leaves);
    push("leaf_log_s", GroupKind::LeafRaw, n_leaves);
    push("leaf_raw_nu", GroupKind::LeafRaw, n_leaves);
    push("sum_log_weights", GroupKind::SumLogWeights, n_sum_weights);
    push(
        "bottleneck_w1",
        GroupKind::BottleneckWeight,
        bottleneck.w1.data.len(),
    );
    push("bottleneck_b1", GroupKind::BottleneckBias, bottleneck.b1.len());
    push(
        "bottleneck_w2",
        GroupKind::BottleneckWeight,
        bottleneck.w2.data.len(),
    );
    push("bottleneck_b2", GroupKind::BottleneckBias, bottleneck.b2.len());
    let total = offset;

    let mut flat = vec![0.0; total];
    let mut sum_ranges = Vec::new();
    {
        let mut leaf = 0usize;
        let mut sum_off = groups[SUM_LOG_W.0].offset;
        for node in &circuit.nodes {
            match node {
                NodeKind::Leaf { params, .. } => {
                    flat[groups[LEAF_G.0].offset + leaf] = params.g;
                    flat[groups[LEAF_W.0].offset + 3 * leaf..groups[LEAF_W.0].offset + 3 * leaf + 3]
                        .copy_from_slice(&params.w_logits);
                    flat[groups[LEAF_MU.0].offset + leaf] = params.mu;
                    flat[groups[LEAF_LOG_S.0].offset + leaf] = params.log_s;
                    flat[groups[LEAF_RAW_NU.0].offset + leaf] = params.raw_nu;
                    leaf += 1;
                }
                NodeKind::Sum { log_weights, .. } => {
                    flat[sum_off..sum_off + log_weights.len()].copy_from_slice(log_weights);
                    sum_ranges.push((sum_off, log_weights.len()));
                    sum_off += log_weights.len();
                }
                NodeKind::Product { .. } => {}
            }
        }
    }
    flat[groups[BN_W1.0].offset..groups[BN_W1.0].offset + bottleneck.w1.data.len()]
        .copy_from_slice(&bottleneck.w1.data);
    flat[groups[BN_B1.0].offset..groups[BN_B1.0].offset + bottleneck.b1.len()]
        .copy_from_slice(&bottleneck.b1);
    flat[groups[BN_W2.0].offset..groups[BN_W2.0].offset + bottleneck.w2.data.len()]
        .copy_from_slice(&bottleneck.w2.data);
    flat[groups[BN_B2.0].offset..groups[BN_B2.0].offset + bottleneck.b2.len()]
        .copy_from_slice(&bottleneck.b2);

    (
        flat,
        ParamLayout {
            groups,
            sum_ranges,
            total,
            n_leaves,
        },
    )
}

/// Write a flat parameter vector back into the circuit and bottleneck.
pub fn write_back(
    flat: &[f64],
    layout: &ParamLayout,
    circuit: &mut CircuitGraph,
    bottleneck: &mut Bottleneck,
) {
    assert_eq!(flat.len(), layout.total, "flat vector does not match layout");
    let g = |id: ParamId| &flat[layout.span(id)];
    let mut leaf = 0usize;
    let mut sum_idx = 0usize;
    for node in circuit.nodes.iter_mut() {
        match node {
            NodeKind::Leaf { params, .. } => {
                params.g = g(LEAF_G)[leaf];
                params.w_logits.copy_from_slice(&g(LEAF_W)[3 * leaf..3 * leaf + 3]);
                params.mu = g(LEAF_MU)[leaf];
                params.log_s = g(LEAF_LOG_S)[leaf];
                params.raw_nu = g(LEAF_RAW_NU)[leaf];
                leaf += 1;
            }
            NodeKind::Sum { log_weights, .. } => {
                let (off, len) = layout.sum_ranges[sum_idx];
                log_weights.copy_from_slice(&flat[off..off + len]);
                sum_idx += 1;
            }
            NodeKind::Product { .. } => {}
        }
    }
    bottleneck.w1.data.copy_from_slice(g(BN_W1));
    bottleneck.b1.copy_from_slice(g(BN_B1));
    bottleneck.w2.data.copy_from_slice(g(BN_W2));
    bottleneck.b2.copy_from_slice(g(BN_B2));
}
