//! Two-layer rectified projection from the LM hidden space into the
//! circuit's input space: z = W2·max(0, W1·h + b1) + b2.
//!
//! The rectifier sits between the layers only; the output is unconstrained
//! so z can take negative values for the location-scale leaves.

use crate::math::Matrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    /// hidden_mid × d_llm
    pub w1: Matrix,
    /// hidden_mid
    pub b1: Vec<f64>,
    /// d_pc × hidden_mid
    pub w2: Matrix,
    /// d_pc
    pub b2: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum BottleneckError {
    #[error("input has {got} dimensions, bottleneck expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

impl Bottleneck {
    pub fn d_llm(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden_mid(&self) -> usize {
        self.w1.rows
    }

    pub fn d_pc(&self) -> usize {
        self.w2.rows
    }

    /// z = W2·relu(W1·h + b1) + b2.
    pub fn project(&self, h: &[f64]) -> Result<Vec<f64>, BottleneckError> {
        if h.len() != self.d_llm() {
            return Err(BottleneckError::ShapeMismatch {
                expected: self.d_llm(),
                got: h.len(),
            });
        }
        let mut mid = self.w1.matvec(h);
        for (m, b) in mid.iter_mut().zip(&self.b1) {
            *m = (*m + b).max(0.0);
        }
        let mut z = self.w2.matvec(&mid);
        for (zi, b) in z.iter_mut().zip(&self.b2) {
            *zi += b;
        }
        Ok(z)
    }
}

/// Glorot-uniform initialization: entries ~ U(-a, a), a = √(6/(fan_in+fan_out)),
/// zero biases. Deterministic per seed.
pub fn init_bottleneck(d_llm: usize, hidden_mid: usize, d_pc: usize, rng_seed: u64) -> Bottleneck {
    assert!(d_llm >= 1 && hidden_mid >= 1 && d_pc >= 1, "dims must be >= 1");
    assert!(
        hidden_mid >= d_pc,
        "hidden_mid ({hidden_mid}) must be at least d_pc ({d_pc}): compression happens at the output layer"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut glorot = |rows: usize, cols: usize| -> Matrix {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-a..a))
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    Bottleneck {
        w1: glorot(hidden_mid, d_llm),
        b1: vec![0.0; hidden_mid],
        w2: glorot(d_pc, hidden_mid),
        b2: vec![0.0; d_pc],
    }
}
