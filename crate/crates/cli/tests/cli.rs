//! End-to-end tests of the `jct` binary: every subcommand, the documented
//! exit codes, and byte-identical reruns.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn jct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jct"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny synthesis settings shared by the pipeline tests: utterances long
/// enough that the downsampled length admits at least one masked position.
fn synth_flags(n: usize, seed: u64) -> Vec<String> {
    [
        format!("seed={seed}"),
        format!("synth.num_utterances={n}"),
        "synth.alphabet_size=5".into(),
        "synth.base_bins=8".into(),
        "synth.min_tokens=3".into(),
        "synth.max_tokens=5".into(),
        "synth.frames_per_token=6".into(),
    ]
    .into_iter()
    .flat_map(|kv| ["--set".to_string(), kv])
    .collect()
}

/// Model small enough that training steps take milliseconds.
fn tiny_model_flags() -> Vec<String> {
    [
        "model.encoder.d_model=8",
        "model.encoder.heads=2",
        "model.encoder.blocks=1",
        "model.encoder.d_ff=16",
        "model.encoder.conv_channels=[2,3]",
        "model.encoder.input_bins=8",
        "model.decoder.d_model=8",
        "model.decoder.heads=2",
        "model.decoder.blocks=1",
        "model.decoder.d_ff=16",
        "model.decoder.beam_width=3",
        "model.decoder.max_decode_len=8",
    ]
    .into_iter()
    .flat_map(|kv| ["--set".to_string(), kv.to_string()])
    .collect()
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn synth_manifest(path: &Path, n: usize, seed: u64) {
    let mut args = vec!["synth-data".to_string(), "--out".into(), path.display().to_string()];
    args.extend(synth_flags(n, seed));
    assert_ok(&jct(&strs(&args)));
}

#[test]
fn synth_data_writes_a_loadable_manifest() {
    let dir = TempDir::new().unwrap();
    let manifest = dir.path().join("train.jsonl");
    synth_manifest(&manifest, 6, 17);
    let loaded = jct_core::features::load_manifest(&manifest).expect("manifest parses");
    assert_eq!(loaded.len(), 6);
    assert!(loaded.iter().all(|(seq, text)| seq.duration_frames() >= 18 && !text.is_empty()));
}

#[test]
fn missing_manifest_path_exits_two_and_names_the_key() {
    let dir = TempDir::new().unwrap();
    let out = jct(&["pretrain", "--set", &format!("paths.out_dir={}", dir.path().display())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("paths.train_manifest"), "stderr: {}", stderr(&out));

    let out = jct(&[
        "pretrain",
        "--set",
        "paths.train_manifest=/definitely/not/here.jsonl",
        "--set",
        &format!("paths.out_dir={}", dir.path().display()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("paths.train_manifest"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_config_key_exits_two() {
    let out = jct(&["pretrain", "--set", "train.max_stepz=5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("max_stepz"), "stderr: {}", stderr(&out));
}

#[test]
fn scratch_mode_rejects_a_checkpoint_flag() {
    let out = jct(&["finetune", "--mode", "scratch", "--checkpoint", "/tmp/anywhere"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("scratch"), "stderr: {}", stderr(&out));
}

#[test]
fn selftest_passes() {
    let out = jct(&["selftest"]);
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("all suites passed"), "stdout: {text}");
    assert!(!text.contains("FAIL"), "stdout: {text}");
}

fn pretrain_args(manifest: &Path, out_dir: &Path, steps: u64) -> Vec<String> {
    let mut args = vec!["pretrain".to_string()];
    args.extend(tiny_model_flags());
    for kv in [
        format!("paths.train_manifest={}", manifest.display()),
        format!("paths.out_dir={}", out_dir.display()),
        format!("train.max_steps={steps}"),
        "train.batch_size=4".into(),
        "train.eval_every=3".into(),
    ] {
        args.push("--set".into());
        args.push(kv);
    }
    args
}

#[test]
fn zero_step_pretrain_still_writes_checkpoints() {
    let dir = TempDir::new().unwrap();
    let manifest = dir.path().join("train.jsonl");
    synth_manifest(&manifest, 6, 17);
    let run = dir.path().join("run");
    assert_ok(&jct(&strs(&pretrain_args(&manifest, &run, 0))));
    for name in ["epoch1", "best", "final"] {
        let meta = run.join("checkpoints").join(name).join("meta.json");
        assert!(meta.exists(), "missing {}", meta.display());
    }
    assert!(run.join("loss.csv").exists());
    assert!(run.join("effective_config.json").exists());
    assert!(run.join("run_meta.json").exists());
}

#[test]
fn identical_invocations_produce_identical_artifacts() {
    let dir = TempDir::new().unwrap();
    let manifest = dir.path().join("train.jsonl");
    synth_manifest(&manifest, 8, 21);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_ok(&jct(&strs(&pretrain_args(&manifest, &a, 5))));
    assert_ok(&jct(&strs(&pretrain_args(&manifest, &b, 5))));
    let read = |p: &Path| std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    assert_eq!(read(&a.join("loss.csv")), read(&b.join("loss.csv")));
    assert_same_files(&a.join("checkpoints/final"), &b.join("checkpoints/final"));
}

/// Every file under `a` exists under `b` with identical bytes (recursive).
fn assert_same_files(a: &Path, b: &Path) {
    let mut seen = 0;
    for entry in std::fs::read_dir(a).unwrap() {
        let path = entry.unwrap().path();
        let other = b.join(path.file_name().unwrap());
        if path.is_dir() {
            assert_same_files(&path, &other);
        } else {
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&other).unwrap_or_else(|e| panic!("{}: {e}", other.display())),
                "{} differs between reruns",
                path.display()
            );
            seen += 1;
        }
    }
    assert!(seen > 0 || std::fs::read_dir(b).unwrap().count() == 0);
}

/// The full tool chain on one tiny corpus: pretrain → frozen finetune →
/// evaluate → decode → attention dump, checking each command's artifacts.
#[test]
fn pipeline_runs_end_to_end() {
    let dir = TempDir::new().unwrap();
    let train = dir.path().join("train.jsonl");
    let eval = dir.path().join("eval.jsonl");
    synth_manifest(&train, 10, 17);
    synth_manifest(&eval, 3, 18);

    // Pretrain.
    let pre = dir.path().join("pre");
    assert_ok(&jct(&strs(&pretrain_args(&train, &pre, 4))));
    let pre_final = pre.join("checkpoints/final");

    // Frozen fine-tune from the pretrained encoder.
    let ft = dir.path().join("ft");
    let mut args = vec![
        "finetune".to_string(),
        "--mode".into(),
        "frozen".into(),
        "--checkpoint".into(),
        pre_final.display().to_string(),
    ];
    args.extend(tiny_model_flags());
    for kv in [
        format!("paths.train_manifest={}", train.display()),
        format!("paths.out_dir={}", ft.display()),
        "train.max_steps=4".into(),
        "train.batch_size=4".into(),
        "train.eval_every=4".into(),
        "train.frozen_steps=2".into(),
    ] {
        args.push("--set".into());
        args.push(kv);
    }
    assert_ok(&jct(&strs(&args)));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ft.join("run_meta.json")).unwrap()).unwrap();
    let frozen = meta["frozen_params"].as_array().expect("frozen_params recorded");
    assert!(!frozen.is_empty());
    assert!(frozen.iter().all(|v| v.as_str().unwrap().starts_with("mpe.")));
    assert!(
        meta["trainable_elements"].as_u64().unwrap() < meta["total_elements"].as_u64().unwrap()
    );
    let ft_final = ft.join("checkpoints/final");

    // Evaluate.
    let ev = dir.path().join("ev");
    let mut args = vec![
        "evaluate".to_string(),
        "--checkpoint".into(),
        ft_final.display().to_string(),
    ];
    args.extend(tiny_model_flags());
    for kv in [
        format!("paths.eval_manifest={}", eval.display()),
        format!("paths.out_dir={}", ev.display()),
    ] {
        args.push("--set".into());
        args.push(kv);
    }
    let out = jct(&strs(&args));
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("WER"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("eval_report.json")).unwrap())
            .unwrap();
    assert!(report["wer"].as_f64().unwrap() >= 0.0);
    let decode_lines = std::fs::read_to_string(ev.join("decode.jsonl")).unwrap();
    assert_eq!(decode_lines.lines().count(), 3);
    for line in decode_lines.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["utt_id"].is_string() && rec["hyp"].is_string() && rec["ref"].is_string());
    }

    // Greedy-ish decode with beam 1.
    let dec = dir.path().join("dec");
    let mut args = vec![
        "decode".to_string(),
        "--checkpoint".into(),
        ft_final.display().to_string(),
        "--beam".into(),
        "1".into(),
    ];
    args.extend(tiny_model_flags());
    for kv in [
        format!("paths.eval_manifest={}", eval.display()),
        format!("paths.out_dir={}", dec.display()),
    ] {
        args.push("--set".into());
        args.push(kv);
    }
    assert_ok(&jct(&strs(&args)));
    assert_eq!(std::fs::read_to_string(dec.join("decode.jsonl")).unwrap().lines().count(), 3);

    // Attention dump from the pretraining checkpoint.
    let att = dir.path().join("att");
    let mut args = vec![
        "attention-dump".to_string(),
        "--checkpoint".into(),
        pre_final.display().to_string(),
        "--layer".into(),
        "0".into(),
        "--head".into(),
        "1".into(),
    ];
    args.extend(tiny_model_flags());
    for kv in [
        format!("paths.eval_manifest={}", eval.display()),
        format!("paths.out_dir={}", att.display()),
    ] {
        args.push("--set".into());
        args.push(kv);
    }
    assert_ok(&jct(&strs(&args)));

    // Attention rows are probability distributions.
    let csv = std::fs::read_to_string(att.join("attention/l0h1.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!(!rows.is_empty());
    let n = rows.len();
    for row in &rows {
        assert_eq!(row.len(), n, "attention matrix must be square");
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "row sums to {sum}");
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    // PGM: binary P5, full byte range implied by the header, n×n payload.
    let pgm = std::fs::read(att.join("attention/l0h1.pgm")).unwrap();
    let header = format!("P5\n{n} {n}\n255\n");
    assert!(pgm.starts_with(header.as_bytes()), "bad PGM header");
    assert_eq!(pgm.len(), header.len() + n * n);

    // Out-of-range head is a configuration error.
    let mut bad = args.clone();
    let head_pos = bad.iter().position(|a| a == "--head").unwrap();
    bad[head_pos + 1] = "9".into();
    let out = jct(&strs(&bad));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("head 9"), "stderr: {}", stderr(&out));
}
