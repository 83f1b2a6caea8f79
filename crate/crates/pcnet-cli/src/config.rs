//! Run configuration: TOML (or JSON) file, `PCNET_SEED` environment
//! override, then explicit command-line flags, in increasing precedence.
//! The fully resolved config is written into every run directory so a run
//! can be reproduced byte-for-byte from its artifacts alone.

use anyhow::{anyhow, Context, Result};
use pcnet::toylm::ToyLmConfig;
use pcnet::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

// Deterministic seed derivations for the independent random streams.
pub const CORPUS_SALT: u64 = 0x1001;
pub const EVAL_SALT: u64 = 0x2002;
pub const BOTTLENECK_SALT: u64 = 0x3003;
pub const SPLIT_SALT: u64 = 0x4004;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds swept by `ablate`.
    pub seeds: Vec<u64>,
    pub model: ModelSection,
    pub toylm: ToyLmSection,
    pub corpus: CorpusSection,
    pub training: TrainingSection,
    pub detect: DetectSection,
    pub decode: DecodeSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            seeds: vec![42, 43, 44],
            model: ModelSection::default(),
            toylm: ToyLmSection::default(),
            corpus: CorpusSection::default(),
            training: TrainingSection::default(),
            detect: DetectSection::default(),
            decode: DecodeSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Circuit input dimensionality D_PC.
    pub proj_dim: usize,
    /// Bottleneck mid width; defaults to 2·proj_dim when absent.
    pub hidden_mid: Option<usize>,
    pub depth: usize,
    pub branching: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            proj_dim: 128,
            hidden_mid: None,
            depth: 4,
            branching: 3,
        }
    }
}

impl ModelSection {
    pub fn hidden_mid(&self) -> usize {
        self.hidden_mid.unwrap_or(2 * self.proj_dim)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLmSection {
    pub vocab_size: usize,
    pub d_llm: usize,
    pub n_anchors: usize,
    pub n_halluc_tokens: usize,
    pub displacement: f64,
    pub recurrence_scale: f64,
    pub logit_sharpness: f64,
    pub twin_shrink: f64,
    pub twin_jitter: f64,
}

impl Default for ToyLmSection {
    fn default() -> Self {
        let d = ToyLmConfig::default();
        ToyLmSection {
            vocab_size: d.vocab_size,
            d_llm: d.d_llm,
            n_anchors: d.n_anchors,
            n_halluc_tokens: d.n_halluc_tokens,
            displacement: d.displacement,
            recurrence_scale: d.recurrence_scale,
            logit_sharpness: d.logit_sharpness,
            twin_shrink: d.twin_shrink,
            twin_jitter: d.twin_jitter,
        }
    }
}

impl ToyLmSection {
    pub fn to_lm_config(&self, seed: u64) -> ToyLmConfig {
        ToyLmConfig {
            vocab_size: self.vocab_size,
            d_llm: self.d_llm,
            n_anchors: self.n_anchors,
            n_halluc_tokens: self.n_halluc_tokens,
            displacement: self.displacement,
            recurrence_scale: self.recurrence_scale,
            logit_sharpness: self.logit_sharpness,
            twin_shrink: self.twin_shrink,
            twin_jitter: self.twin_jitter,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n_train: usize,
    pub n_eval: usize,
    pub gen_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_train: 500,
            n_eval: 200,
            gen_len: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainingSection {
            alpha: d.alpha,
            gamma: d.gamma,
            lr: d.lr,
            weight_decay: d.weight_decay,
            epochs: d.epochs,
            batch_size: d.batch_size,
            clip_norm: d.clip_norm,
        }
    }
}

impl TrainingSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    /// Fraction of the scored evaluation pool held out to calibrate τ;
    /// the rest is the test split.
    pub holdout_frac: f64,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection { holdout_frac: 0.25 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub k: usize,
    pub gate_margin: f64,
    pub max_tokens: usize,
    /// Fixed anomaly threshold; when absent it is calibrated on the
    /// validation split exactly as `detect` does.
    pub tau: Option<f64>,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            k: 8,
            gate_margin: 0.05,
            max_tokens: 8,
            tau: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub train_sizes: Vec<usize>,
    pub proj_dims: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            train_sizes: vec![50, 100, 250, 500, 750, 1000],
            proj_dims: vec![32, 64, 128, 256, 512],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let parsed: RunConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| anyhow!("invalid config field: {e}"))?
        } else {
            toml::from_str(&text).map_err(|e| anyhow!("invalid config field: {e}"))?
        };
        Ok(parsed)
    }

    /// Field-level sanity checks; violations are usage errors.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, reason: &str| Err(anyhow!("invalid config field `{name}`: {reason}"));
        if !(0.0..=1.0).contains(&self.training.alpha) {
            return field("training.alpha", "must lie in [0, 1]");
        }
        if self.training.gamma <= 0.0 {
            return field("training.gamma", "must be positive");
        }
        if self.training.lr < 0.0 {
            return field("training.lr", "must be non-negative");
        }
        if self.training.batch_size == 0 {
            return field("training.batch_size", "must be at least 1");
        }
        if self.training.clip_norm <= 0.0 {
            return field("training.clip_norm", "must be positive");
        }
        if self.corpus.n_train == 0 || self.corpus.n_train % 2 != 0 {
            return field("corpus.n_train", "must be a positive even number");
        }
        if self.corpus.n_eval == 0 || self.corpus.n_eval % 2 != 0 {
            return field("corpus.n_eval", "must be a positive even number");
        }
        if self.corpus.gen_len == 0 {
            return field("corpus.gen_len", "must be at least 1");
        }
        if !(0.0 < self.detect.holdout_frac && self.detect.holdout_frac < 1.0) {
            return field("detect.holdout_frac", "must lie strictly between 0 and 1");
        }
        if self.decode.k == 0 {
            return field("decode.k", "must be at least 1");
        }
        if self.decode.max_tokens == 0 {
            return field("decode.max_tokens", "must be at least 1");
        }
        if self.model.proj_dim == 0 {
            return field("model.proj_dim", "must be at least 1");
        }
        if self.model.depth == 0 {
            return field("model.depth", "must be at least 1");
        }
        if self.model.branching < 2 {
            return field("model.branching", "must be at least 2");
        }
        if self.model.hidden_mid() < self.model.proj_dim {
            return field("model.hidden_mid", "must be at least proj_dim");
        }
        if self.seeds.is_empty() {
            return field("seeds", "must contain at least one seed");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Command-line overrides applied on top of file + environment.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// RNG seed (also settable via PCNET_SEED).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seed list for sweeps.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub proj_dim: Option<usize>,
    #[arg(long)]
    pub hidden_mid: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub branching: Option<usize>,
    #[arg(long)]
    pub displacement: Option<f64>,
    #[arg(long)]
    pub d_llm: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
    #[arg(long)]
    pub gen_len: Option<usize>,
    #[arg(long)]
    pub holdout_frac: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub gate_margin: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Anomaly threshold; accepts `inf` and `-inf`.
    #[arg(long, allow_hyphen_values = true)]
    pub tau: Option<f64>,
    /// Comma-separated train sizes for the train_size axis.
    #[arg(long, value_delimiter = ',')]
    pub train_sizes: Option<Vec<usize>>,
    /// Comma-separated projection dims for the proj_dim axis.
    #[arg(long, value_delimiter = ',')]
    pub proj_dims: Option<Vec<usize>>,
}

/// file < PCNET_SEED < flags.
pub fn resolve(config_path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(env_seed) = std::env::var("PCNET_SEED") {
        cfg.seed = env_seed
            .parse()
            .map_err(|_| anyhow!("invalid config field `seed`: PCNET_SEED=`{env_seed}` is not an integer"))?;
    }
    let o = overrides;
    macro_rules! set {
        ($field:expr, $val:expr) => {
            if let Some(v) = $val {
                $field = v;
            }
        };
    }
    set!(cfg.seed, o.seed);
    set!(cfg.seeds, o.seeds.clone());
    set!(cfg.training.alpha, o.alpha);
    set!(cfg.training.gamma, o.gamma);
    set!(cfg.training.lr, o.lr);
    set!(cfg.training.weight_decay, o.weight_decay);
    set!(cfg.training.epochs, o.epochs);
    set!(cfg.training.batch_size, o.batch_size);
    set!(cfg.training.clip_norm, o.clip_norm);
    set!(cfg.model.proj_dim, o.proj_dim);
    if o.hidden_mid.is_some() {
        cfg.model.hidden_mid = o.hidden_mid;
    }
    set!(cfg.model.depth, o.depth);
    set!(cfg.model.branching, o.branching);
    set!(cfg.toylm.displacement, o.displacement);
    set!(cfg.toylm.d_llm, o.d_llm);
    set!(cfg.corpus.n_train, o.n_train);
    set!(cfg.corpus.n_eval, o.n_eval);
    set!(cfg.corpus.gen_len, o.gen_len);
    set!(cfg.detect.holdout_frac, o.holdout_frac);
    set!(cfg.decode.k, o.k);
    set!(cfg.decode.gate_margin, o.gate_margin);
    set!(cfg.decode.max_tokens, o.max_tokens);
    if o.tau.is_some() {
        cfg.decode.tau = o.tau;
    }
    set!(cfg.ablate.train_sizes, o.train_sizes.clone());
    set!(cfg.ablate.proj_dims, o.proj_dims.clone());
    cfg.validate()?;
    Ok(cfg)
}
