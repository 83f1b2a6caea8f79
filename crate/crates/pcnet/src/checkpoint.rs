//! Versioned JSON checkpoint (`pcnet-ckpt-v1`).
//!
//! All model parameters are stored in raw/unconstrained form as the 16-digit
//! hex encoding of their IEEE-754 bits, so save/load round-trips are lossless
//! at full binary precision (including -0.0, infinities, and NaN payloads).
//! The toy LM rides along under the optional `toylm` key so a checkpoint
//! fully reproduces the model that generated its training states.

use crate::bottleneck::Bottleneck;
use crate::circuit::{CircuitGraph, LeafParams, NodeId, NodeKind};
use crate::math::Matrix;
use crate::toylm::{TokenTag, ToyLmConfig, ToyLmSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const FORMAT: &str = "pcnet-ckpt-v1";

/// f64 carried as the hex string of its bit pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HexF64(pub f64);

impl Serialize for HexF64 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:016x}", self.0.to_bits()))
    }
}

impl<'de> Deserialize<'de> for HexF64 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bits = u64::from_str_radix(&s, 16)
            .map_err(|e| serde::de::Error::custom(format!("bad hex float `{s}`: {e}")))?;
        Ok(HexF64(f64::from_bits(bits)))
    }
}

fn hex_vec(v: &[f64]) -> Vec<HexF64> {
    v.iter().map(|&x| HexF64(x)).collect()
}

fn unhex_vec(v: &[HexF64]) -> Vec<f64> {
    v.iter().map(|h| h.0).collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum NodeRecord {
    Leaf {
        dim: usize,
        g: HexF64,
        w_logits: Vec<HexF64>,
        mu: HexF64,
        log_s: HexF64,
        raw_nu: HexF64,
    },
    Sum {
        children: Vec<u32>,
        log_weights: Vec<HexF64>,
    },
    Product {
        children: Vec<u32>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    data: Vec<HexF64>,
}

impl MatrixRecord {
    fn from_matrix(m: &Matrix) -> Self {
        MatrixRecord {
            rows: m.rows,
            cols: m.cols,
            data: hex_vec(&m.data),
        }
    }

    fn into_matrix(self) -> Result<Matrix, CheckpointError> {
        if self.data.len() != self.rows * self.cols {
            return Err(CheckpointError::Invalid(format!(
                "matrix record {}x{} carries {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(Matrix::from_vec(self.rows, self.cols, unhex_vec(&self.data)))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BottleneckRecord {
    w1: MatrixRecord,
    b1: Vec<HexF64>,
    w2: MatrixRecord,
    b2: Vec<HexF64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ToyLmRecord {
    config: ToyLmConfig,
    embeddings: MatrixRecord,
    recurrence: MatrixRecord,
    output: MatrixRecord,
    anchors: MatrixRecord,
    halluc_direction: Vec<HexF64>,
    token_tags: Vec<TokenTag>,
    norm_bound: HexF64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    num_dims: usize,
    depth: usize,
    branching: usize,
    seed: u64,
    root: u32,
    nodes: Vec<NodeRecord>,
    bottleneck: BottleneckRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    toylm: Option<ToyLmRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub circuit: CircuitGraph,
    pub bottleneck: Bottleneck,
    pub toylm: Option<ToyLmSpec>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format `{found}`, expected `{expected}`")]
    Format { found: String, expected: &'static str },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

pub fn to_json(
    circuit: &CircuitGraph,
    bottleneck: &Bottleneck,
    toylm: Option<&ToyLmSpec>,
) -> String {
    let nodes = circuit
        .nodes
        .iter()
        .map(|n| match n {
            NodeKind::Leaf { dim, params } => NodeRecord::Leaf {
                dim: *dim,
                g: HexF64(params.g),
                w_logits: hex_vec(&params.w_logits),
                mu: HexF64(params.mu),
                log_s: HexF64(params.log_s),
                raw_nu: HexF64(params.raw_nu),
            },
            NodeKind::Sum {
                children,
                log_weights,
            } => NodeRecord::Sum {
                children: children.iter().map(|c| c.0).collect(),
                log_weights: hex_vec(log_weights),
            },
            NodeKind::Product { children } => NodeRecord::Product {
                children: children.iter().map(|c| c.0).collect(),
            },
        })
        .collect();
    let file = CheckpointFile {
        format: FORMAT.to_string(),
        num_dims: circuit.num_dims,
        depth: circuit.depth,
        branching: circuit.branching,
        seed: circuit.seed,
        root: circuit.root.0,
        nodes,
        bottleneck: BottleneckRecord {
            w1: MatrixRecord::from_matrix(&bottleneck.w1),
            b1: hex_vec(&bottleneck.b1),
            w2: MatrixRecord::from_matrix(&bottleneck.w2),
            b2: hex_vec(&bottleneck.b2),
        },
        toylm: toylm.map(|s| ToyLmRecord {
            config: s.config.clone(),
            embeddings: MatrixRecord::from_matrix(&s.embeddings),
            recurrence: MatrixRecord::from_matrix(&s.recurrence),
            output: MatrixRecord::from_matrix(&s.output),
            anchors: MatrixRecord::from_matrix(&s.anchors),
            halluc_direction: hex_vec(&s.halluc_direction),
            token_tags: s.token_tags.clone(),
            norm_bound: HexF64(s.norm_bound),
        }),
    };
    serde_json::to_string_pretty(&file).expect("checkpoint serialization cannot fail")
}

pub fn from_json(json: &str) -> Result<Checkpoint, CheckpointError> {
    let file: CheckpointFile = serde_json::from_str(json)?;
    if file.format != FORMAT {
        return Err(CheckpointError::Format {
            found: file.format,
            expected: FORMAT,
        });
    }
    let n = file.nodes.len();
    if file.root as usize >= n {
        return Err(CheckpointError::Invalid(format!(
            "root {} out of range ({n} nodes)",
            file.root
        )));
    }
    let check_children = |children: &[u32]| -> Result<Vec<NodeId>, CheckpointError> {
        children
            .iter()
            .map(|&c| {
                if (c as usize) < n {
                    Ok(NodeId(c))
                } else {
                    Err(CheckpointError::Invalid(format!(
                        "child id {c} out of range ({n} nodes)"
                    )))
                }
            })
            .collect()
    };
    let mut nodes = Vec::with_capacity(n);
    for record in file.nodes {
        nodes.push(match record {
            NodeRecord::Leaf {
                dim,
                g,
                w_logits,
                mu,
                log_s,
                raw_nu,
            } => {
                if w_logits.len() != 3 {
                    return Err(CheckpointError::Invalid(format!(
                        "leaf over dim {dim} has {} mixture logits, expected 3",
                        w_logits.len()
                    )));
                }
                NodeKind::Leaf {
                    dim,
                    params: LeafParams::new(
                        g.0,
                        [w_logits[0].0, w_logits[1].0, w_logits[2].0],
                        mu.0,
                        log_s.0,
                        raw_nu.0,
                    ),
                }
            }
            NodeRecord::Sum {
                children,
                log_weights,
            } => NodeKind::Sum {
                children: check_children(&children)?,
                log_weights: unhex_vec(&log_weights),
            },
            NodeRecord::Product { children } => NodeKind::Product {
                children: check_children(&children)?,
            },
        });
    }
    let circuit = CircuitGraph {
        nodes,
        root: NodeId(file.root),
        num_dims: file.num_dims,
        depth: file.depth,
        branching: file.branching,
        seed: file.seed,
    };
    let bottleneck = Bottleneck {
        w1: file.bottleneck.w1.into_matrix()?,
        b1: unhex_vec(&file.bottleneck.b1),
        w2: file.bottleneck.w2.into_matrix()?,
        b2: unhex_vec(&file.bottleneck.b2),
    };
    let toylm = match file.toylm {
        None => None,
        Some(r) => Some(ToyLmSpec {
            config: r.config,
            embeddings: r.embeddings.into_matrix()?,
            recurrence: r.recurrence.into_matrix()?,
            output: r.output.into_matrix()?,
            anchors: r.anchors.into_matrix()?,
            halluc_direction: unhex_vec(&r.halluc_direction),
            token_tags: r.token_tags,
            norm_bound: r.norm_bound.0,
        }),
    };
    Ok(Checkpoint {
        circuit,
        bottleneck,
        toylm,
    })
}

pub fn save(
    path: &Path,
    circuit: &CircuitGraph,
    bottleneck: &Bottleneck,
    toylm: Option<&ToyLmSpec>,
) -> Result<(), CheckpointError> {
    std::fs::write(path, to_json(circuit, bottleneck, toylm))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_json(&std::fs::read_to_string(path)?)
}
