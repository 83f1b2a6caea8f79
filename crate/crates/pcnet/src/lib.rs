//! Tractable density estimation over language-model hidden states, with
//! density-gated lookahead decoding.
//!
//! The pipeline has four stages:
//!
//! 1. [`bottleneck`] projects a high-dimensional hidden state `h` into a
//!    compact latent vector `z` through a 2-layer rectified map.
//! 2. [`circuit`] evaluates the exact log-density of `z` under a smooth,
//!    decomposable probabilistic circuit with heterogeneous mixture leaves,
//!    in one linear-time pass.
//! 3. [`training`] fits circuit and bottleneck jointly on paired factual /
//!    hallucinated states with a composite generative + contrastive margin
//!    objective, differentiated exactly by the [`autodiff`] tape.
//! 4. [`detection`] turns the negative log-likelihood into a calibrated
//!    anomaly score, and [`decoding`] uses it to gate a density-penalized
//!    lookahead over the top-k candidate tokens.
//!
//! [`toylm`] provides a deterministic recurrent language model with planted
//! factual-manifold geometry so the whole pipeline runs and is measurable
//! at desk scale.

pub mod autodiff;
pub mod bottleneck;
pub mod checkpoint;
pub mod circuit;
pub mod decoding;
pub mod detection;
pub mod math;
pub mod params;
pub mod toylm;
pub mod training;
