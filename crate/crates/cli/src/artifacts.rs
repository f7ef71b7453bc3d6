//! Run-directory artifacts: effective config, run metadata, loss CSV,
//! decode JSON-lines, and attention dumps (CSV + 8-bit PGM).
//!
//! Everything written here is a deterministic function of the run's inputs —
//! no timestamps, no absolute paths — so identical runs produce identical
//! artifact bytes.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use jct_core::features::Vocabulary;
use jct_core::training::{loss_csv, EvalReport, LossRow};

use crate::config::RunConfig;
use crate::CliError;

/// Create the run directory and write `effective_config.json` and
/// `run_meta.json`. `meta` carries command-specific summary fields.
pub fn init_run_dir(
    out_dir: &Path,
    cfg: &RunConfig,
    command: &str,
    meta: serde_json::Value,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)?;
    let mut config_json = serde_json::to_string_pretty(cfg).map_err(io_err)?;
    config_json.push('\n');
    std::fs::write(out_dir.join("effective_config.json"), config_json)?;

    let mut doc = serde_json::Map::new();
    doc.insert("command".into(), command.into());
    doc.insert("seed".into(), cfg.seed.into());
    doc.insert(
        "config_hash".into(),
        jct_core::training::config_hash(cfg).into(),
    );
    doc.insert(
        "build".into(),
        format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")).into(),
    );
    doc.insert("parallel".into(), cfg!(feature = "parallel").into());
    if let serde_json::Value::Object(extra) = meta {
        for (k, v) in extra {
            doc.insert(k, v);
        }
    }
    let mut meta_json =
        serde_json::to_string_pretty(&serde_json::Value::Object(doc)).map_err(io_err)?;
    meta_json.push('\n');
    std::fs::write(out_dir.join("run_meta.json"), meta_json)?;
    Ok(())
}

fn io_err(e: serde_json::Error) -> CliError {
    CliError::Runtime(format!("serializing run artifacts: {e}"))
}

pub fn write_loss_csv(out_dir: &Path, rows: &[LossRow]) -> Result<PathBuf, CliError> {
    let path = out_dir.join("loss.csv");
    std::fs::write(&path, loss_csv(rows))?;
    Ok(path)
}

/// One decode output line.
#[derive(serde::Serialize)]
struct DecodeRecord<'a> {
    utt_id: &'a str,
    hyp: String,
    r#ref: String,
    score_att: f64,
    score_ctc: f64,
}

/// Write decode results as JSON-lines:
/// `{"utt_id", "hyp", "ref", "score_att", "score_ctc"}`.
pub fn write_decode_jsonl(
    path: &Path,
    report: &EvalReport,
    vocab: &Vocabulary,
) -> Result<(), CliError> {
    let mut file = std::fs::File::create(path)?;
    for u in &report.utterances {
        let rec = DecodeRecord {
            utt_id: &u.utt_id,
            hyp: vocab.decode(&u.hypothesis),
            r#ref: vocab.decode(&u.reference),
            score_att: u.score_att,
            score_ctc: u.score_ctc,
        };
        serde_json::to_writer(&mut file, &rec).map_err(io_err)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Write the evaluation summary as JSON.
pub fn write_eval_report(
    path: &Path,
    report: &EvalReport,
    vocab: &Vocabulary,
) -> Result<(), CliError> {
    let utterances: Vec<serde_json::Value> = report
        .utterances
        .iter()
        .map(|u| {
            serde_json::json!({
                "utt_id": u.utt_id,
                "ref": vocab.decode(&u.reference),
                "hyp": vocab.decode(&u.hypothesis),
                "errors": u.errors,
                "ref_tokens": u.reference.len(),
            })
        })
        .collect();
    let doc = serde_json::json!({
        "wer": report.wer,
        "total_errors": report.total_errors,
        "total_ref_tokens": report.total_ref_tokens,
        "utterances": utterances,
    });
    let mut json = serde_json::to_string_pretty(&doc).map_err(io_err)?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

/// Write a row-major matrix as CSV with full-precision floats.
pub fn write_matrix_csv(
    path: &Path,
    data: &[f64],
    rows: usize,
    cols: usize,
) -> Result<(), CliError> {
    debug_assert_eq!(data.len(), rows * cols);
    let mut out = String::new();
    for r in 0..rows {
        let row: Vec<String> = data[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| v.to_string())
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a matrix as an 8-bit binary PGM, min-max scaled to [0, 255]
/// (a constant image maps to 0).
pub fn write_pgm(path: &Path, data: &[f64], rows: usize, cols: usize) -> Result<(), CliError> {
    debug_assert_eq!(data.len(), rows * cols);
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if max > min { 255.0 / (max - min) } else { 0.0 };
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(data.iter().map(|&v| ((v - min) * scale).round() as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}
