//! Subcommand implementations. Each command loads the effective config,
//! runs the corresponding library stage, writes its artifacts into the run
//! directory, and prints a short human-readable summary.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use jct_core::decoder::BeamOpts;
use jct_core::encoder::{diagonal_band_mass, downsampled_len, MaskAction, MaskPlan, MpeEncoder};
use jct_core::features::{
    build_batch, prepare_corpus, synthesize_corpus, tokenize_corpus, FeatureSequence, Vocabulary,
};
use jct_core::model::JctModel;
use jct_core::nn::ParamCtx;
use jct_core::numerics::rng::Stream;
use jct_core::numerics::tape::Tape;
use jct_core::numerics::tensor::Tensor;
use jct_core::training::{
    config_hash, evaluate, finetune, load_checkpoint, mean_wer, noam_lr, pretrain,
    save_checkpoint, Checkpoint, FinetuneMode, TrainingError,
};

use crate::artifacts;
use crate::config::RunConfig;
use crate::CliError;

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// A required path from the config; reports the offending key when unset.
fn require_path<'a>(value: &'a str, key: &str) -> Result<&'a Path, CliError> {
    if value.is_empty() {
        return Err(config_err(format!("{key} is not set (pass --set {key}=... or put it in the config)")));
    }
    Ok(Path::new(value))
}

/// Load a manifest, mapping a missing file to a configuration error that
/// names the key it came from.
fn load_corpus(path: &Path, key: &str) -> Result<Vec<(FeatureSequence, String)>, CliError> {
    if !path.exists() {
        return Err(config_err(format!("{key} points to {}, which does not exist", path.display())));
    }
    jct_core::features::load_manifest(path).map_err(|e| runtime(format!("reading {}: {e}", path.display())))
}

/// Delta expansion + per-speaker normalization, then a dimension check
/// against the encoder configuration.
fn prepare_and_check(corpus: &mut Vec<FeatureSequence>, cfg: &RunConfig) -> Result<(), CliError> {
    prepare_corpus(corpus).map_err(|e| runtime(e.to_string()))?;
    let want = cfg.model.encoder.input_dim();
    let got = corpus[0].dims();
    if got != want {
        return Err(config_err(format!(
            "feature dimension {got} does not match the encoder's expectation {want} \
             (input_channels {} × input_bins {}; manifests hold static features, deltas are added on load)",
            cfg.model.encoder.input_channels, cfg.model.encoder.input_bins
        )));
    }
    Ok(())
}

fn load_params(
    dir: &Path,
    expect_hash: Option<&str>,
    force: bool,
) -> Result<Checkpoint<f64>, CliError> {
    load_checkpoint::<f64>(dir, expect_hash, force).map_err(|e| match e {
        TrainingError::HashMismatch { .. } => runtime(format!(
            "{e}; the checkpoint at {} was produced under a different model configuration",
            dir.display()
        )),
        other => runtime(format!("loading checkpoint {}: {other}", dir.display())),
    })
}

// ---------------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------------

pub fn cmd_synth_data(cfg: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => require_path(&cfg.paths.train_manifest, "paths.train_manifest")?.to_path_buf(),
    };
    let (corpus, vocab) = synthesize_corpus(&cfg.synth, cfg.seed);
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    jct_core::features::save_manifest(&out_path, &corpus, &vocab)
        .map_err(|e| runtime(e.to_string()))?;
    let speakers: BTreeSet<&str> = corpus.iter().map(|u| u.speaker_id.as_str()).collect();
    println!(
        "wrote {} utterances ({} speakers, {} distinct tokens, {} bins) to {}",
        corpus.len(),
        speakers.len(),
        vocab.size() - Vocabulary::FIRST_TOKEN,
        cfg.synth.base_bins,
        out_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let manifest = require_path(&cfg.paths.train_manifest, "paths.train_manifest")?;
    let out_dir = require_path(&cfg.paths.out_dir, "paths.out_dir")?.to_path_buf();
    let loaded = load_corpus(manifest, "paths.train_manifest")?;
    // Pretraining ignores labels; tokenize against the corpus's own
    // characters just to fill the field.
    let vocab = Vocabulary::from_transcripts(loaded.iter().map(|(_, t)| t.as_str()));
    let mut corpus = tokenize_corpus(loaded, &vocab).map_err(|e| runtime(e.to_string()))?;
    prepare_and_check(&mut corpus, cfg)?;

    let run = pretrain::<f64>(&cfg.model.encoder, &cfg.train, &corpus, cfg.seed)?;

    let hash = config_hash(&cfg.model.encoder);
    artifacts::init_run_dir(
        &out_dir,
        cfg,
        "pretrain",
        serde_json::json!({
            "steps": run.steps,
            "initial_val": run.initial_val,
            "best_val": run.best_val,
            "best_step": run.best_step,
            "diverged": run.diverged,
        }),
    )?;
    artifacts::write_loss_csv(&out_dir, &run.rows)?;
    let ck = out_dir.join("checkpoints");
    save_checkpoint(&ck.join("epoch1"), "pretrain", run.epoch1_step, &hash, None, &run.epoch1_params, None)?;
    save_checkpoint(&ck.join("best"), "pretrain", run.best_step, &hash, None, &run.best_params, None)?;
    save_checkpoint(&ck.join("final"), "pretrain", run.steps, &hash, None, &run.final_params, Some(&run.adam))?;

    println!(
        "pretrain: {} steps, validation {:.6} -> {:.6} (best at step {})",
        run.steps, run.initial_val, run.best_val, run.best_step
    );
    println!("artifacts in {}", out_dir.display());
    if run.diverged {
        return Err(runtime(
            "training diverged (non-finite loss); the checkpoints hold the last good parameters",
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

pub fn cmd_finetune(
    cfg: &RunConfig,
    mode_flag: Option<&str>,
    checkpoint_flag: Option<&Path>,
) -> Result<(), CliError> {
    let mode: FinetuneMode = mode_flag
        .unwrap_or(&cfg.finetune_mode)
        .parse()
        .map_err(config_err)?;
    if mode == FinetuneMode::Scratch && checkpoint_flag.is_some() {
        return Err(config_err(
            "--mode scratch does not take a checkpoint; drop --checkpoint or pick direct/frozen",
        ));
    }
    let manifest = require_path(&cfg.paths.train_manifest, "paths.train_manifest")?;
    let out_dir = require_path(&cfg.paths.out_dir, "paths.out_dir")?.to_path_buf();
    let loaded = load_corpus(manifest, "paths.train_manifest")?;
    let vocab = Vocabulary::from_transcripts(loaded.iter().map(|(_, t)| t.as_str()));
    if vocab.size() == Vocabulary::FIRST_TOKEN {
        return Err(runtime("fine-tuning needs labeled data; the manifest transcripts are all empty"));
    }
    let mut corpus = tokenize_corpus(loaded, &vocab).map_err(|e| runtime(e.to_string()))?;
    prepare_and_check(&mut corpus, cfg)?;

    let model = JctModel::new(cfg.model.clone(), vocab.clone()).map_err(|e| config_err(e.to_string()))?;
    let pretrained = match mode {
        FinetuneMode::Scratch => None,
        _ => {
            let dir = match checkpoint_flag {
                Some(p) => p.to_path_buf(),
                None => require_path(&cfg.paths.checkpoint, "paths.checkpoint")?.to_path_buf(),
            };
            let ck = load_params(&dir, Some(&config_hash(&cfg.model.encoder)), cfg.force_checkpoint)?;
            Some(ck.params)
        }
    };

    let run = finetune(&model, &cfg.train, &corpus, pretrained.as_ref(), mode, cfg.seed)?;

    let hash = config_hash(&cfg.model);
    let frozen: Vec<&String> = run.frozen_names.iter().collect();
    artifacts::init_run_dir(
        &out_dir,
        cfg,
        "finetune",
        serde_json::json!({
            "mode": format!("{mode:?}").to_lowercase(),
            "steps": run.steps,
            "frozen_params": frozen,
            "trainable_elements": run.trainable_elements,
            "total_elements": run.total_elements,
            "infeasible_rows": run.infeasible_total,
            "diverged": run.diverged,
        }),
    )?;
    artifacts::write_loss_csv(&out_dir, &run.rows)?;
    save_checkpoint(
        &out_dir.join("checkpoints").join("final"),
        "finetune",
        run.steps,
        &hash,
        Some(&vocab),
        &run.params,
        Some(&run.adam),
    )?;

    let last = run.rows.last();
    println!(
        "finetune[{mode:?}]: {} steps, final loss {} ({}/{} elements trainable)",
        run.steps,
        last.map(|r| r.loss.to_string()).unwrap_or_else(|| "-".into()),
        run.trainable_elements,
        run.total_elements
    );
    println!("artifacts in {}", out_dir.display());
    if run.diverged {
        return Err(runtime(
            "training diverged (non-finite loss); the checkpoint holds the last good parameters",
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate / decode
// ---------------------------------------------------------------------------

/// Load a fine-tuned checkpoint, rebuild its model and vocabulary, tokenize
/// the raw corpus against it, and decode everything.
fn decode_with_checkpoint(
    cfg: &RunConfig,
    dir: &Path,
    raw: &[(FeatureSequence, String)],
    opts: &BeamOpts,
) -> Result<(jct_core::training::EvalReport, Vocabulary), CliError> {
    let ck = load_params(dir, Some(&config_hash(&cfg.model)), cfg.force_checkpoint)?;
    let vocab = ck.meta.vocab.clone().ok_or_else(|| {
        runtime(format!(
            "checkpoint {} has no vocabulary (stage {:?}); evaluate/decode need a fine-tuned checkpoint",
            dir.display(),
            ck.meta.stage
        ))
    })?;
    let model = JctModel::new(cfg.model.clone(), vocab.clone()).map_err(|e| config_err(e.to_string()))?;
    let mut corpus = tokenize_corpus(raw.to_vec(), &vocab).map_err(|e| {
        runtime(format!("corpus does not match the checkpoint vocabulary: {e}"))
    })?;
    prepare_and_check(&mut corpus, cfg)?;
    let report = evaluate(&model, &ck.params, &corpus, opts)?;
    Ok((report, vocab))
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint_flags: &[PathBuf]) -> Result<(), CliError> {
    let manifest = require_path(&cfg.paths.eval_manifest, "paths.eval_manifest")?;
    let out_dir = require_path(&cfg.paths.out_dir, "paths.out_dir")?.to_path_buf();
    let raw = load_corpus(manifest, "paths.eval_manifest")?;
    let checkpoints: Vec<PathBuf> = if checkpoint_flags.is_empty() {
        vec![require_path(&cfg.paths.checkpoint, "paths.checkpoint")?.to_path_buf()]
    } else {
        checkpoint_flags.to_vec()
    };
    let opts = BeamOpts::from_config(&cfg.model.decoder);

    std::fs::create_dir_all(&out_dir)?;
    let mut wers = Vec::new();
    for (i, dir) in checkpoints.iter().enumerate() {
        let (report, vocab) = decode_with_checkpoint(cfg, dir, &raw, &opts)?;
        let suffix = if checkpoints.len() == 1 { String::new() } else { format!("_{i}") };
        artifacts::write_decode_jsonl(&out_dir.join(format!("decode{suffix}.jsonl")), &report, &vocab)?;
        artifacts::write_eval_report(&out_dir.join(format!("eval_report{suffix}.json")), &report, &vocab)?;
        println!(
            "checkpoint {}: WER {:.2}% ({} errors / {} reference tokens)",
            dir.display(),
            100.0 * report.wer,
            report.total_errors,
            report.total_ref_tokens
        );
        wers.push(report.wer);
    }
    let mean = mean_wer(&wers);
    if wers.len() > 1 {
        println!("mean WER over {} runs: {:.2}%", wers.len(), 100.0 * mean);
    }
    artifacts::init_run_dir(
        &out_dir,
        cfg,
        "evaluate",
        serde_json::json!({
            "checkpoints": checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "wers": wers,
            "mean_wer": mean,
            "beam_width": opts.beam_width,
            "ctc_weight": opts.ctc_weight,
        }),
    )?;
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

pub fn cmd_decode(
    cfg: &RunConfig,
    checkpoint_flag: Option<&Path>,
    beam: Option<usize>,
) -> Result<(), CliError> {
    let manifest = require_path(&cfg.paths.eval_manifest, "paths.eval_manifest")?;
    let out_dir = require_path(&cfg.paths.out_dir, "paths.out_dir")?.to_path_buf();
    let raw = load_corpus(manifest, "paths.eval_manifest")?;
    let dir = match checkpoint_flag {
        Some(p) => p.to_path_buf(),
        None => require_path(&cfg.paths.checkpoint, "paths.checkpoint")?.to_path_buf(),
    };
    let mut opts = BeamOpts::from_config(&cfg.model.decoder);
    if let Some(b) = beam {
        if b == 0 {
            return Err(config_err("--beam must be ≥ 1"));
        }
        opts.beam_width = b;
    }
    let (report, vocab) = decode_with_checkpoint(cfg, &dir, &raw, &opts)?;
    std::fs::create_dir_all(&out_dir)?;
    artifacts::write_decode_jsonl(&out_dir.join("decode.jsonl"), &report, &vocab)?;
    artifacts::init_run_dir(
        &out_dir,
        cfg,
        "decode",
        serde_json::json!({
            "checkpoint": dir.display().to_string(),
            "utterances": report.utterances.len(),
            "beam_width": opts.beam_width,
            "ctc_weight": opts.ctc_weight,
        }),
    )?;
    println!(
        "decoded {} utterances (beam {}) into {}",
        report.utterances.len(),
        opts.beam_width,
        out_dir.join("decode.jsonl").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// attention-dump
// ---------------------------------------------------------------------------

pub fn cmd_attention_dump(
    cfg: &RunConfig,
    checkpoint_flag: Option<&Path>,
    utt_id: Option<&str>,
    layer: usize,
    head: usize,
) -> Result<(), CliError> {
    let enc_cfg = &cfg.model.encoder;
    if layer >= enc_cfg.blocks {
        return Err(config_err(format!(
            "layer {layer} out of range: the encoder has {} blocks",
            enc_cfg.blocks
        )));
    }
    if head >= enc_cfg.heads {
        return Err(config_err(format!(
            "head {head} out of range: the encoder has {} heads",
            enc_cfg.heads
        )));
    }
    let out_dir = require_path(&cfg.paths.out_dir, "paths.out_dir")?.to_path_buf();
    let manifest_key = if cfg.paths.eval_manifest.is_empty() {
        "paths.train_manifest"
    } else {
        "paths.eval_manifest"
    };
    let manifest_value = if cfg.paths.eval_manifest.is_empty() {
        &cfg.paths.train_manifest
    } else {
        &cfg.paths.eval_manifest
    };
    let manifest = require_path(manifest_value, manifest_key)?;
    let raw = load_corpus(manifest, manifest_key)?;
    let mut corpus: Vec<FeatureSequence> = raw.into_iter().map(|(s, _)| s).collect();
    prepare_and_check(&mut corpus, cfg)?;

    let dir = match checkpoint_flag {
        Some(p) => p.to_path_buf(),
        None => require_path(&cfg.paths.checkpoint, "paths.checkpoint")?.to_path_buf(),
    };
    // Either stage works: a pretraining checkpoint holds exactly the encoder
    // parameters, a fine-tuned one holds a superset.
    let ck = load_params(&dir, None, true)?;
    let expected = if ck.meta.stage == "pretrain" {
        config_hash(&cfg.model.encoder)
    } else {
        config_hash(&cfg.model)
    };
    if ck.meta.config_hash != expected && !cfg.force_checkpoint {
        return Err(runtime(format!(
            "checkpoint config hash mismatch: expected {expected}, found {} (set force_checkpoint=true to override)",
            ck.meta.config_hash
        )));
    }

    let index = match utt_id {
        Some(id) => corpus
            .iter()
            .position(|u| u.utt_id == id)
            .ok_or_else(|| runtime(format!("utterance {id:?} is not in {}", manifest.display())))?,
        None => 0,
    };
    let picked = corpus[index].utt_id.clone();
    let batch = build_batch::<f64>(&corpus, &[index]);

    let encoder = MpeEncoder::new("mpe", enc_cfg.clone()).map_err(|e| config_err(e.to_string()))?;
    let mut tape = Tape::<f64>::new(cfg.seed, 0, false);
    let mut ctx = ParamCtx::new(&ck.params);
    let encoded = encoder
        .encode_features(&mut tape, &mut ctx, &batch, true)
        .map_err(|e| runtime(e.to_string()))?;
    let probs = &encoded.attention[layer]; // 1 × heads × T × T
    let t_len = probs.shape()[3];
    let t_valid = encoded.ds_lengths[0];
    let matrix: Vec<f64> = probs.data()[head * t_len * t_len..(head + 1) * t_len * t_len]
        .chunks(t_len)
        .take(t_valid)
        .flat_map(|row| row[..t_valid].iter().copied())
        .collect();

    let att_dir = out_dir.join("attention");
    std::fs::create_dir_all(&att_dir)?;
    let stem = format!("l{layer}h{head}");
    artifacts::write_matrix_csv(&att_dir.join(format!("{stem}.csv")), &matrix, t_valid, t_valid)?;
    artifacts::write_pgm(&att_dir.join(format!("{stem}.pgm")), &matrix, t_valid, t_valid)?;

    let band = diagonal_band_mass(&Tensor::<f64>::new(vec![t_valid, t_valid], matrix), t_valid, 2);
    artifacts::init_run_dir(
        &out_dir,
        cfg,
        "attention-dump",
        serde_json::json!({
            "checkpoint": dir.display().to_string(),
            "utt_id": picked,
            "layer": layer,
            "head": head,
            "frames": t_valid,
            "diag_band_mass": band,
        }),
    )?;
    println!(
        "utterance {picked}, layer {layer}, head {head}: {t_valid}×{t_valid} weights, band(|i−j|≤2) mass {band:.4}"
    );
    println!("wrote {}.csv and {}.pgm in {}", stem, stem, att_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

type SuiteResult = Result<String, String>;

fn suite_schedule() -> SuiteResult {
    // Independent recomputation through a differently factored expression.
    for i in 0..100u64 {
        let mut s = Stream::derived(11, "selftest_schedule", &[i]);
        let k = s.uniform_in(0.1, 10.0);
        let d = 1 + s.below(1024);
        let w = 1 + s.below(30_000) as u64;
        let n = 1 + s.below(100_000) as u64;
        let got = noam_lr(k, d, w, n).map_err(|e| e.to_string())?;
        let (nf, wf) = (n as f64, w as f64);
        let want = k / (d as f64).sqrt() * f64::min(1.0 / nf.sqrt(), nf / (wf * wf.sqrt()));
        if (got - want).abs() > 1e-12 * want.abs().max(1.0) {
            return Err(format!("lr({k},{d},{w},{n}) = {got}, recomputed {want}"));
        }
    }
    let reference = noam_lr(10.0, 512, 25_000, 25_000).map_err(|e| e.to_string())?;
    if (reference - 2.795e-3).abs() > 1e-6 {
        return Err(format!("reference point evaluated to {reference}, expected ≈2.795e-3"));
    }
    let peak = (1..=4000u64)
        .max_by(|&a, &b| {
            let la = noam_lr(2.0, 64, 400, a).unwrap();
            let lb = noam_lr(2.0, 64, 400, b).unwrap();
            la.partial_cmp(&lb).unwrap()
        })
        .unwrap();
    if peak != 400 {
        return Err(format!("peak at n={peak}, expected n=warmup=400"));
    }
    Ok("100 recomputations, reference point, peak position".to_string())
}

fn suite_downsampling() -> SuiteResult {
    for t in 1..=200usize {
        let want = ((t as f64 / 2.0).ceil() / 2.0).ceil() as usize;
        if downsampled_len(t) != want {
            return Err(format!("T({t}) = {}, expected {want}", downsampled_len(t)));
        }
    }
    if downsampled_len(100) != 25 {
        return Err(format!("T(100) = {}, expected 25", downsampled_len(100)));
    }
    Ok("t = 1..=200 and the quarter point".to_string())
}

fn suite_masking() -> SuiteResult {
    let cfg = jct_core::encoder::EncoderConfig::default();
    let t = 100usize;
    let expected_count = 15usize;
    let (mut zeros, mut swaps, mut keeps) = (0usize, 0usize, 0usize);
    for i in 0..1000u64 {
        let mut stream = Stream::derived(23, "selftest_mask", &[i]);
        let plan = MaskPlan::generate(t, &cfg, &mut stream);
        if plan.actions.len() != expected_count {
            return Err(format!("plan {i} masks {} frames, expected {expected_count}", plan.actions.len()));
        }
        for action in plan.actions.values() {
            match action {
                MaskAction::Zero => zeros += 1,
                MaskAction::Swap(_) => swaps += 1,
                MaskAction::Keep => keeps += 1,
            }
        }
    }
    let n = (1000 * expected_count) as f64;
    for (name, observed, p) in [("zero", zeros, 0.8), ("swap", swaps, 0.1), ("keep", keeps, 0.1)] {
        let sigma = (n * p * (1.0 - p)).sqrt();
        let delta = (observed as f64 - n * p).abs();
        if delta > 3.0 * sigma {
            return Err(format!(
                "{name} action count {observed} deviates from {:.0} by {delta:.1} (> 3σ = {:.1})",
                n * p,
                3.0 * sigma
            ));
        }
    }
    Ok(format!("1000 plans; mix {zeros}/{swaps}/{keeps} within 3σ of 80/10/10"))
}

fn suite_ctc_oracle() -> SuiteResult {
    use jct_core::ctc::{ctc_brute_force, ctc_loss, ctc_prefix_beam};
    let mut checked = 0;
    for i in 0..100u64 {
        let mut s = Stream::derived(31, "selftest_ctc", &[i]);
        let t = 1 + s.below(6);
        let v = 2 + s.below(3);
        let l = s.below(4);
        let lp = Tensor::<f64>::new(
            vec![t, v],
            (0..t * v).map(|_| s.normal()).collect(),
        );
        let labels: Vec<usize> = (0..l).map(|_| 1 + s.below(v - 1)).collect();
        let fast = ctc_loss(&lp, &labels).map_err(|e| e.to_string())?;
        let slow = ctc_brute_force(&lp, &labels).map_err(|e| e.to_string())?;
        match (fast.infeasible, slow.is_finite()) {
            (true, false) => {}
            (false, true) => {
                if (fast.loss - slow).abs() > 1e-9 {
                    return Err(format!(
                        "instance {i}: dynamic program {} vs enumeration {slow}",
                        fast.loss
                    ));
                }
            }
            _ => return Err(format!("instance {i}: feasibility disagreement")),
        }
        checked += 1;
    }
    // Prefix beam top-1 against exhaustive label scoring.
    for i in 0..20u64 {
        let mut s = Stream::derived(37, "selftest_ctc_beam", &[i]);
        let t = 2 + s.below(4);
        let v = 2 + s.below(3);
        let lp_raw = Tensor::<f64>::new(vec![t, v], (0..t * v).map(|_| s.normal()).collect());
        // Normalize rows into log-probabilities.
        let mut data = lp_raw.data().to_vec();
        for row in data.chunks_mut(v) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            for x in row.iter_mut() {
                *x -= z;
            }
        }
        let lp = Tensor::<f64>::new(vec![t, v], data);
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
        while let Some(seq) = stack.pop() {
            let out = ctc_loss(&lp, &seq).map_err(|e| e.to_string())?;
            if !out.infeasible {
                let score = -out.loss;
                if best.as_ref().map_or(true, |(b, _)| score > *b) {
                    best = Some((score, seq.clone()));
                }
            }
            if seq.len() < t {
                for c in 1..v {
                    let mut next = seq.clone();
                    next.push(c);
                    stack.push(next);
                }
            }
        }
        let (best_score, best_labels) = best.expect("the empty sequence is always feasible");
        let beam = ctc_prefix_beam(&lp, 4096).map_err(|e| e.to_string())?;
        let top = beam.first().ok_or("prefix beam returned nothing")?;
        if top.labels != best_labels || (top.log_prob - best_score).abs() > 1e-9 {
            return Err(format!(
                "instance {i}: beam top-1 {:?} ({}) vs exhaustive {:?} ({})",
                top.labels, top.log_prob, best_labels, best_score
            ));
        }
    }
    Ok(format!("{checked} loss instances vs enumeration, 20 beam instances vs exhaustive scoring"))
}

fn suite_gradients() -> SuiteResult {
    use jct_core::decoder::DecoderConfig;
    use jct_core::encoder::EncoderConfig;
    use jct_core::model::ModelConfig;
    use jct_core::numerics::gradcheck::{grad_check, GradCheckOpts};

    let vocab = Vocabulary::from_transcripts(["abc"]);
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            d_model: 8,
            heads: 2,
            blocks: 1,
            d_ff: 16,
            conv_channels: (2, 3),
            input_bins: 8,
            ..Default::default()
        },
        decoder: DecoderConfig { blocks: 1, heads: 2, d_model: 8, d_ff: 16, ..Default::default() },
    };
    let model = JctModel::new(cfg, vocab).map_err(|e| e.to_string())?;
    let d_in = model.cfg.encoder.input_dim();
    let mut s = Stream::derived(41, "selftest_grad", &[]);
    let corpus = vec![
        FeatureSequence {
            utt_id: "g0".into(),
            speaker_id: "s".into(),
            frames: Tensor::new(vec![10, d_in], (0..10 * d_in).map(|_| s.normal()).collect()),
            transcript: vec![4, 5],
        },
        FeatureSequence {
            utt_id: "g1".into(),
            speaker_id: "s".into(),
            frames: Tensor::new(vec![7, d_in], (0..7 * d_in).map(|_| s.normal()).collect()),
            transcript: vec![6],
        },
    ];
    let batch = build_batch::<f64>(&corpus, &[0, 1]);
    let params = model.init_params::<f64>(43);

    let report = grad_check(
        &params,
        |p, want_grad| {
            let mut tape = Tape::<f64>::new(0, 0, false);
            let mut ctx = ParamCtx::new(p);
            let parts = model.joint_loss_batch(&mut tape, &mut ctx, &batch)?;
            let value = tape.value(parts.loss).item();
            if want_grad {
                Ok((value, Some(tape.backward(parts.loss)?)))
            } else {
                Ok((value, None))
            }
        },
        &GradCheckOpts { max_coords_per_param: Some(2), seed: 47, ..Default::default() },
    )
    .map_err(|e| e.to_string())?;
    if !report.passes(1e-4) {
        return Err(format!("finite differences disagree: {:?}", report.worst));
    }

    // Joint gradient = α·∇ctc + (1−α)·∇att.
    let grads_for = |alpha: f64| -> Result<jct_core::numerics::tape::GradStore<f64>, String> {
        let mut cfg = model.cfg.clone();
        cfg.decoder.alpha = alpha;
        let m = JctModel::new(cfg, model.vocab.clone()).map_err(|e| e.to_string())?;
        let mut tape = Tape::<f64>::new(0, 0, false);
        let mut ctx = ParamCtx::new(&params);
        let parts = m.joint_loss_batch(&mut tape, &mut ctx, &batch).map_err(|e| e.to_string())?;
        tape.backward(parts.loss).map_err(|e| e.to_string())
    };
    let (gc, ga, gj) = (grads_for(1.0)?, grads_for(0.0)?, grads_for(0.3)?);
    for (name, j) in gj.iter() {
        let c = gc.get(name).ok_or("missing ctc gradient")?;
        let a = ga.get(name).ok_or("missing attention gradient")?;
        for ((jv, cv), av) in j.data().iter().zip(c.data()).zip(a.data()) {
            let want = 0.3 * cv + 0.7 * av;
            if (jv - want).abs() > 1e-10 {
                return Err(format!("{name}: joint gradient {jv} vs combination {want}"));
            }
        }
    }
    Ok(format!(
        "{} finite-difference coordinates on the joint loss; α-combination exact to 1e-10",
        report.coords_checked
    ))
}

pub fn cmd_selftest() -> Result<(), CliError> {
    let suites: [(&str, fn() -> SuiteResult); 5] = [
        ("schedule", suite_schedule),
        ("downsampling", suite_downsampling),
        ("masking", suite_masking),
        ("ctc-oracle", suite_ctc_oracle),
        ("gradients", suite_gradients),
    ];
    let mut failures = 0;
    for (name, run) in suites {
        let started = std::time::Instant::now();
        match run() {
            Ok(detail) => {
                println!("selftest {name:<14} ok   ({detail}; {:.1}s)", started.elapsed().as_secs_f64());
            }
            Err(msg) => {
                failures += 1;
                println!("selftest {name:<14} FAIL {msg}");
            }
        }
    }
    if failures > 0 {
        return Err(runtime(format!("{failures} selftest suite(s) failed")));
    }
    println!("selftest: all suites passed");
    Ok(())
}
