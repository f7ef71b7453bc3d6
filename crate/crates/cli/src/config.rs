//! Run configuration: one JSON document covering the model, both training
//! stages, synthesis, and artifact paths, with dotted-path `--set`
//! overrides. Unknown keys are rejected; every field has a default; the
//! effective (post-override) config is written into each run directory.

use std::path::Path;

use jct_core::features::SynthesisConfig;
use jct_core::model::ModelConfig;
use jct_core::training::TrainConfig;

use crate::CliError;

/// Input/output locations. Empty strings mean "not set"; commands that need
/// a path report the offending key.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Training manifest (JSONL), used by pretrain and finetune.
    pub train_manifest: String,
    /// Evaluation manifest (JSONL), used by evaluate, decode, and
    /// attention-dump.
    pub eval_manifest: String,
    /// Checkpoint directory to start from (finetune) or to read
    /// (evaluate/decode/attention-dump).
    pub checkpoint: String,
    /// Run directory for artifacts: effective config, loss CSV, checkpoints,
    /// decode output, attention dumps.
    pub out_dir: String,
}

/// The complete, self-describing configuration of one run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every random choice in a run derives from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthesisConfig,
    /// Fine-tuning mode: `direct`, `frozen`, or `scratch`.
    pub finetune_mode: String,
    /// Load checkpoints even when their config hash does not match.
    pub force_checkpoint: bool,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthesisConfig::default(),
            finetune_mode: "scratch".to_string(),
            force_checkpoint: false,
            paths: PathsConfig::default(),
        }
    }
}

/// Parse an override value: JSON when it parses (numbers, booleans, arrays,
/// quoted strings), a bare string otherwise — so `--set train.max_steps=50`
/// and `--set finetune_mode=frozen` both work.
fn parse_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

/// Apply one `key.path=value` override to a JSON document, creating
/// intermediate objects as needed.
fn apply_override(doc: &mut serde_json::Value, setting: &str) -> Result<(), CliError> {
    let (path, raw) = setting.split_once('=').ok_or_else(|| {
        CliError::Config(format!("override {setting:?} must have the form key.path=value"))
    })?;
    if path.is_empty() {
        return Err(CliError::Config(format!("override {setting:?} has an empty key")));
    }
    let mut node = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Config(format!(
                "override {path:?} descends through {:?}, which is not an object",
                segments[..i].join(".")
            ))
        })?;
        if i + 1 == segments.len() {
            obj.insert(seg.to_string(), parse_value(raw));
            return Ok(());
        }
        node = obj
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
    }
    unreachable!("loop returns on the last segment");
}

/// Load the configuration: the JSON file when given (defaults otherwise),
/// then the `--set` overrides in order, then a strict typed parse that
/// reports unknown or ill-typed fields by name.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut doc: serde_json::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("config {} is not valid JSON: {e}", p.display())))?
        }
        None => serde_json::Value::Object(serde_json::Map::new()),
    };
    if !doc.is_object() {
        return Err(CliError::Config("config root must be a JSON object".to_string()));
    }
    for setting in overrides {
        apply_override(&mut doc, setting)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc)
        .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
    cfg.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = load_config(None, &[]).unwrap();
        assert_eq!(cfg.seed, 17);
        assert_eq!(cfg.model.encoder.d_model, 64);
        assert_eq!(cfg.finetune_mode, "scratch");
    }

    #[test]
    fn overrides_reach_nested_fields_and_keep_types() {
        let sets = vec![
            "seed=99".to_string(),
            "model.encoder.d_model=32".to_string(),
            "model.decoder.d_model=32".to_string(),
            "model.encoder.conv_channels=[2,3]".to_string(),
            "train.max_steps=0".to_string(),
            "finetune_mode=frozen".to_string(),
            "paths.out_dir=/tmp/x".to_string(),
        ];
        let cfg = load_config(None, &sets).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.model.encoder.d_model, 32);
        assert_eq!(cfg.model.encoder.conv_channels, (2, 3));
        assert_eq!(cfg.train.max_steps, 0);
        assert_eq!(cfg.finetune_mode, "frozen");
        assert_eq!(cfg.paths.out_dir, "/tmp/x");
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = load_config(None, &["model.encoder.dmodel=32".to_string()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dmodel"), "message should name the bad field: {msg}");
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn malformed_overrides_are_config_errors() {
        assert!(load_config(None, &["no_equals_sign".to_string()]).is_err());
        assert!(load_config(None, &["=5".to_string()]).is_err());
        // Descending through a scalar.
        assert!(load_config(None, &["seed.x=1".to_string()]).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        // d_model mismatch between encoder and decoder fails model validation.
        let err = load_config(None, &["model.encoder.d_model=32".to_string()]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "{err}");
    }
}
