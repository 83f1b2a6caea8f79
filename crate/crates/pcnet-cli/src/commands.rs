//! Subcommand implementations. `train`, `detect`, and each `ablate` sweep
//! point all run through the same pipeline helpers, so a sweep point is
//! reproducible by the standalone commands with the same configuration.

use crate::config::{
    RunConfig, BOTTLENECK_SALT, CORPUS_SALT, EVAL_SALT, SPLIT_SALT,
};
use anyhow::{anyhow, bail, Context, Result};
use pcnet::bottleneck::{init_bottleneck, Bottleneck};
use pcnet::checkpoint;
use pcnet::circuit::{build_random_circuit, validate, CircuitGraph};
use pcnet::decoding::{DecodeOptions, GatePolicy};
use pcnet::detection::{
    auroc, calibrate_threshold, f1_at, nll_score, split_indices, DetectionReport, Label,
    ScoredSample,
};
use pcnet::toylm::{
    build_planted_corpus_with, evaluate_decode, PlantedCorpus, PromptKind, ToyLmSpec,
};
use pcnet::training::{history_to_csv, train, TrainResult};
use std::path::{Path, PathBuf};

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

pub struct TrainedModels {
    pub lm: ToyLmSpec,
    pub circuit: CircuitGraph,
    pub bottleneck: Bottleneck,
    pub corpus: PlantedCorpus,
    pub result: TrainResult,
}

/// Build toy LM + corpus + circuit + bottleneck from the config seeds and
/// run the training loop.
pub fn train_pipeline(cfg: &RunConfig, seed: u64) -> Result<TrainedModels> {
    let lm = ToyLmSpec::build(cfg.toylm.to_lm_config(seed));
    let corpus = build_planted_corpus_with(
        &lm,
        cfg.corpus.n_train,
        seed ^ CORPUS_SALT,
        cfg.corpus.gen_len,
        cfg.decode.k,
    )?;
    let mut circuit = build_random_circuit(
        cfg.model.proj_dim,
        cfg.model.depth,
        cfg.model.branching,
        seed,
    )?;
    let mut bottleneck = init_bottleneck(
        cfg.toylm.d_llm,
        cfg.model.hidden_mid(),
        cfg.model.proj_dim,
        seed ^ BOTTLENECK_SALT,
    );
    let result = train(
        &mut circuit,
        &mut bottleneck,
        &corpus.states,
        &cfg.training.to_train_config(seed),
    )?;
    Ok(TrainedModels {
        lm,
        circuit,
        bottleneck,
        corpus,
        result,
    })
}

/// Score the held-out evaluation states and split them into the τ
/// calibration set and the test set.
pub struct EvalScores {
    pub validation: Vec<ScoredSample>,
    pub test: Vec<ScoredSample>,
    pub corpus: PlantedCorpus,
}

pub fn score_eval_pool(
    cfg: &RunConfig,
    seed: u64,
    lm: &ToyLmSpec,
    circuit: &CircuitGraph,
    bottleneck: &Bottleneck,
) -> Result<EvalScores> {
    let corpus = build_planted_corpus_with(
        lm,
        cfg.corpus.n_eval,
        seed ^ EVAL_SALT,
        cfg.corpus.gen_len,
        cfg.decode.k,
    )?;
    let mut scores = Vec::with_capacity(cfg.corpus.n_eval);
    for h in &corpus.states.h_pos {
        scores.push(ScoredSample {
            nll: nll_score(circuit, bottleneck, h)?,
            label: Label::Factual,
        });
    }
    for h in &corpus.states.h_neg {
        scores.push(ScoredSample {
            nll: nll_score(circuit, bottleneck, h)?,
            label: Label::Hallucinated,
        });
    }
    let (val_idx, test_idx) =
        split_indices(scores.len(), cfg.detect.holdout_frac, seed ^ SPLIT_SALT);
    let validation = val_idx.iter().map(|&i| scores[i]).collect();
    let test = test_idx.iter().map(|&i| scores[i]).collect();
    Ok(EvalScores {
        validation,
        test,
        corpus,
    })
}

pub fn detect_report(scores: &EvalScores) -> Result<DetectionReport> {
    let threshold = calibrate_threshold(&scores.validation)?;
    let auroc = auroc(&scores.test)?;
    let f1 = f1_at(&scores.test, threshold.tau);
    let n_pos = scores
        .test
        .iter()
        .filter(|s| s.label == Label::Hallucinated)
        .count();
    Ok(DetectionReport {
        auroc,
        f1,
        tau: threshold.tau,
        n_pos,
        n_neg: scores.test.len() - n_pos,
        per_sample: scores.test.clone(),
    })
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let models = train_pipeline(cfg, cfg.seed)?;
    write_file(out, "config.toml", &cfg.to_toml())?;
    write_file(
        out,
        "checkpoint.json",
        &checkpoint::to_json(&models.circuit, &models.bottleneck, Some(&models.lm)),
    )?;
    write_file(out, "loss.csv", &history_to_csv(&models.result.history))?;
    write_file(out, "corpus.jsonl", &models.corpus.prompts_to_jsonl())?;
    if let Some(step) = models.result.diverged_at {
        bail!(
            "training diverged at step {step}; checkpoint rolled back to the last finite step"
        );
    }
    let last = models
        .result
        .history
        .last()
        .map(|e| format!("final loss {:.4}, pos_nll {:.4}", e.total_loss, e.pos_nll))
        .unwrap_or_else(|| "no epochs run".to_string());
    println!(
        "trained {} epochs on {} paired samples; {last}; wrote {}",
        models.result.history.len(),
        cfg.corpus.n_train,
        out.display()
    );
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<pcnet::checkpoint::Checkpoint> {
    checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

pub fn cmd_detect(cfg: &RunConfig, ckpt_path: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let lm = ckpt
        .toylm
        .ok_or_else(|| anyhow!("checkpoint carries no toylm section; cannot rebuild states"))?;
    let scores = score_eval_pool(cfg, cfg.seed, &lm, &ckpt.circuit, &ckpt.bottleneck)?;
    let report = detect_report(&scores)?;
    write_file(out, "config.toml", &cfg.to_toml())?;
    write_file(
        out,
        "detection_report.json",
        &serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "detect: auroc {:.4}, f1 {:.4}, tau {:.4} ({} test samples); wrote {}",
        report.auroc,
        report.f1,
        report.tau,
        report.per_sample.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DecodeMode {
    /// Pure greedy decoding; the gate never opens.
    Vanilla,
    /// Intervention forced at every step at full strength (β = 1).
    Ungated,
    /// Density-gated lookahead.
    Gated,
}

impl DecodeMode {
    fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Vanilla => "vanilla",
            DecodeMode::Ungated => "ungated",
            DecodeMode::Gated => "gated",
        }
    }
}

pub fn cmd_decode(cfg: &RunConfig, ckpt_path: &Path, mode: DecodeMode, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let lm = ckpt
        .toylm
        .ok_or_else(|| anyhow!("checkpoint carries no toylm section; cannot decode"))?;
    let scores = score_eval_pool(cfg, cfg.seed, &lm, &ckpt.circuit, &ckpt.bottleneck)?;
    let tau = match cfg.decode.tau {
        Some(t) => t,
        None => calibrate_threshold(&scores.validation)?.tau,
    };
    let opts = match mode {
        DecodeMode::Vanilla => DecodeOptions::gated(f64::INFINITY, cfg.decode.k, cfg.decode.gate_margin),
        DecodeMode::Gated => DecodeOptions::gated(tau, cfg.decode.k, cfg.decode.gate_margin),
        DecodeMode::Ungated => DecodeOptions {
            tau,
            k: cfg.decode.k,
            gate_margin: cfg.decode.gate_margin,
            policy: GatePolicy::ForcedFull,
        },
    };
    let (generations, report) = evaluate_decode(
        &lm,
        &scores.corpus.prompts,
        &ckpt.circuit,
        &ckpt.bottleneck,
        &opts,
        cfg.decode.max_tokens,
    )?;

    // Flat per-step trace: one GateDecision per line, plus a per-generation
    // summary CSV carrying the prompt boundaries.
    let mut traces = String::new();
    let mut summary_csv = String::from(
        "prompt,kind,correct,vanilla_correct,intervened_steps,tokens,circuit_evals\n",
    );
    for (i, (gen, prompt)) in generations.iter().zip(&scores.corpus.prompts).enumerate() {
        for d in &gen.decisions {
            traces.push_str(&serde_json::to_string(d)?);
            traces.push('\n');
        }
        let vanilla = pcnet::decoding::greedy_generate(&lm, &prompt.tokens, cfg.decode.max_tokens)?;
        summary_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i,
            match prompt.kind {
                PromptKind::Clean => "clean",
                PromptKind::Adversarial => "adversarial",
            },
            u8::from(gen.tokens == prompt.gold),
            u8::from(vanilla == prompt.gold),
            gen.intervened_steps(),
            gen.tokens
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            gen.circuit_evals,
        ));
    }

    #[derive(serde::Serialize)]
    struct DecodeSummary<'a> {
        mode: &'a str,
        tau: f64,
        #[serde(flatten)]
        report: &'a pcnet::toylm::DecodeEvalReport,
    }
    write_file(out, "config.toml", &cfg.to_toml())?;
    write_file(out, "traces.jsonl", &traces)?;
    write_file(out, "summary.csv", &summary_csv)?;
    write_file(
        out,
        "summary.json",
        &serde_json::to_string_pretty(&DecodeSummary {
            mode: mode.as_str(),
            tau,
            report: &report,
        })?,
    )?;
    println!(
        "decode[{}]: accuracy {:.3}, corruption {:.3}, preservation {:.3}, igr {:.3}; wrote {}",
        mode.as_str(),
        report.accuracy,
        report.corruption_rate,
        report.preservation_rate,
        report.igr,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblateAxis {
    #[value(alias = "train_size")]
    TrainSize,
    #[value(alias = "proj_dim")]
    ProjDim,
}

pub fn cmd_ablate(cfg: &RunConfig, axis: AblateAxis, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write_file(out, "config.toml", &cfg.to_toml())?;
    let mut csv = String::from("axis,value,seed,auroc,f1,tau\n");
    let points: Vec<usize> = match axis {
        AblateAxis::TrainSize => cfg.ablate.train_sizes.clone(),
        AblateAxis::ProjDim => cfg.ablate.proj_dims.clone(),
    };
    let axis_name = match axis {
        AblateAxis::TrainSize => "train_size",
        AblateAxis::ProjDim => "proj_dim",
    };
    for &value in &points {
        for &seed in &cfg.seeds {
            let mut point_cfg = cfg.clone();
            point_cfg.seed = seed;
            match axis {
                AblateAxis::TrainSize => point_cfg.corpus.n_train = value,
                AblateAxis::ProjDim => {
                    point_cfg.model.proj_dim = value;
                    point_cfg.model.hidden_mid = None;
                }
            }
            let models = train_pipeline(&point_cfg, seed)?;
            if let Some(step) = models.result.diverged_at {
                bail!("sweep point {axis_name}={value} seed={seed} diverged at step {step}");
            }
            let scores = score_eval_pool(
                &point_cfg,
                seed,
                &models.lm,
                &models.circuit,
                &models.bottleneck,
            )?;
            let report = detect_report(&scores)?;
            let point_dir = out.join(format!("points/{axis_name}_{value}_seed{seed}"));
            ensure_dir(&point_dir)?;
            write_file(&point_dir, "config.toml", &point_cfg.to_toml())?;
            write_file(
                &point_dir,
                "checkpoint.json",
                &checkpoint::to_json(&models.circuit, &models.bottleneck, Some(&models.lm)),
            )?;
            write_file(
                &point_dir,
                "detection_report.json",
                &serde_json::to_string_pretty(&report)?,
            )?;
            write_file(
                &point_dir,
                "loss.csv",
                &history_to_csv(&models.result.history),
            )?;
            csv.push_str(&format!(
                "{axis_name},{value},{seed},{},{},{}\n",
                report.auroc, report.f1, report.tau
            ));
            println!(
                "ablate {axis_name}={value} seed={seed}: auroc {:.4}, f1 {:.4}",
                report.auroc, report.f1
            );
        }
    }
    write_file(out, "sweep.csv", &csv)?;
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

pub fn cmd_validate_ckpt(ckpt_path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let violations = validate(&ckpt.circuit);
    let b = &ckpt.bottleneck;
    let mut problems: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
    if b.w1.rows != b.b1.len() || b.w2.rows != b.b2.len() || b.w2.cols != b.w1.rows {
        problems.push("bottleneck shapes are inconsistent".to_string());
    }
    if b.hidden_mid() < b.d_pc() {
        problems.push("bottleneck hidden_mid is smaller than d_pc".to_string());
    }
    if !(b.w1.all_finite() && b.w2.all_finite())
        || b.b1.iter().chain(&b.b2).any(|v| !v.is_finite())
    {
        problems.push("bottleneck parameters are not finite".to_string());
    }
    if b.d_pc() != ckpt.circuit.num_dims {
        problems.push(format!(
            "bottleneck output dim {} does not match circuit num_dims {}",
            b.d_pc(),
            ckpt.circuit.num_dims
        ));
    }
    if problems.is_empty() {
        println!(
            "checkpoint ok: {} nodes, {} dims, depth {}, branching {}",
            ckpt.circuit.node_count(),
            ckpt.circuit.num_dims,
            ckpt.circuit.depth,
            ckpt.circuit.branching
        );
        Ok(())
    } else {
        for p in &problems {
            eprintln!("violation: {p}");
        }
        bail!("{} violation(s) found", problems.len())
    }
}
