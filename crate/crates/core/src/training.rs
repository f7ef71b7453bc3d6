//! Training orchestration: the Noam learning-rate schedule, checkpoint
//! save/load, the masked-reconstruction pretraining loop, the three
//! fine-tuning modes (direct, frozen, scratch), and WER evaluation.
//!
//! Both loops are deterministic functions of `(config, corpus, seed)`:
//! batching, masking, and dropout all draw from named substreams of the root
//! seed, and parameter updates iterate in name order. Two identical runs in
//! 64-bit mode produce byte-identical checkpoints and loss logs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use sha2::Digest as _;

use crate::ctc::BLANK;
use crate::decoder::BeamOpts;
use crate::encoder::{downsampled_len, EncoderConfig, MaskPlan, MpeEncoder, ReconstructionMode};
use crate::features::{
    build_batch, make_batches_indexed, Batch, FeatureSequence, FeaturesError, Vocabulary,
};
use crate::model::{is_mpe_param, JctModel};
use crate::nn::{ParamCtx, Params};
use crate::numerics::adam::{adam_step, clip_global_norm, AdamParams, AdamState};
use crate::numerics::io::{load_tensor, save_tensor};
use crate::numerics::rng::Stream;
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Scalar;
use crate::numerics::NumericsError;

/// Errors from training, checkpointing, or evaluation.
#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint config hash mismatch: expected {expected}, found {found} (pass force to override)")]
    HashMismatch { expected: String, found: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Features(#[from] FeaturesError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

fn config_err(msg: impl Into<String>) -> TrainingError {
    TrainingError::Config(msg.into())
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Warmup-then-decay learning rate: `k · d^−0.5 · min(n^−0.5, n · warmup^−1.5)`.
/// Linear ramp up to `n = warmup`, inverse-square-root decay after; the peak
/// is exactly at `n = warmup`.
pub fn noam_lr(k: f64, d_model: usize, warmup: u64, n: u64) -> Result<f64> {
    if n == 0 {
        return Err(config_err("schedule step n must be ≥ 1"));
    }
    if d_model == 0 || warmup == 0 {
        return Err(config_err("schedule needs d_model ≥ 1 and warmup ≥ 1"));
    }
    if !(k > 0.0) {
        return Err(config_err(format!("schedule scale k must be positive, got {k}")));
    }
    let n = n as f64;
    let w = warmup as f64;
    Ok(k * (d_model as f64).powf(-0.5) * f64::min(n.powf(-0.5), n * w.powf(-1.5)))
}

/// The schedule's fixed shape parameters; the step is supplied per query.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub k: f64,
    pub d_model: usize,
    pub warmup: u64,
}

impl Schedule {
    pub fn lr(&self, n: u64) -> Result<f64> {
        noam_lr(self.k, self.d_model, self.warmup, n)
    }
}

// ---------------------------------------------------------------------------
// Loop configuration
// ---------------------------------------------------------------------------

/// Knobs shared by the pretraining and fine-tuning loops.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    /// Noam scale factor `k`.
    pub lr_k: f64,
    /// Noam warmup steps.
    pub warmup: u64,
    /// Global-norm gradient clip.
    pub clip_norm: f64,
    /// Pretraining: validate every this many steps.
    pub eval_every: u64,
    /// Pretraining: stop after this many evaluations without improvement.
    pub patience: u64,
    /// Pretraining: improvement below this does not reset patience.
    pub min_delta: f64,
    /// Pretraining: fraction of the corpus held out for validation.
    pub val_fraction: f64,
    /// Which positions the reconstruction loss averages over:
    /// `masked`, `unmasked`, or `all`.
    pub reconstruction: String,
    /// Frozen fine-tuning: steps with the encoder excluded from updates.
    /// Unset means the whole run.
    pub frozen_steps: Option<u64>,
    /// Frozen fine-tuning: unfreeze everything for `thaw_epochs` after the
    /// frozen phase.
    pub thaw: bool,
    pub thaw_epochs: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            max_steps: 1000,
            lr_k: 2.0,
            warmup: 400,
            clip_norm: 5.0,
            eval_every: 100,
            patience: 10,
            min_delta: 1e-4,
            val_fraction: 0.125,
            reconstruction: "masked".to_string(),
            frozen_steps: None,
            thaw: false,
            thaw_epochs: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be ≥ 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(config_err("clip_norm must be positive"));
        }
        if self.eval_every == 0 {
            return Err(config_err("eval_every must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        self.reconstruction_mode()?;
        if let Some(fs) = self.frozen_steps {
            if fs > self.max_steps {
                return Err(config_err(format!(
                    "frozen_steps {fs} exceeds max_steps {}",
                    self.max_steps
                )));
            }
        }
        Ok(())
    }

    pub fn reconstruction_mode(&self) -> Result<ReconstructionMode> {
        self.reconstruction.parse().map_err(config_err)
    }

    fn schedule(&self, d_model: usize) -> Schedule {
        Schedule { k: self.lr_k, d_model, warmup: self.warmup }
    }
}

// ---------------------------------------------------------------------------
// Loss log
// ---------------------------------------------------------------------------

/// One row of the loss CSV. Pretraining fills `val` at evaluation steps;
/// fine-tuning fills the per-branch columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub ctc: Option<f64>,
    pub att: Option<f64>,
    pub val: Option<f64>,
}

/// Render rows as CSV (stable header, shortest-round-trip floats), so equal
/// runs produce byte-identical logs.
pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,lr,loss,ctc,att,val\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.lr,
            r.loss,
            opt(r.ctc),
            opt(r.att),
            opt(r.val)
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Checkpoint metadata, stored as `meta.json` beside one tensor file per
/// parameter (plus optimizer moments under `adam_m/` and `adam_v/`).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    /// `pretrain` or `finetune`.
    pub stage: String,
    pub step: u64,
    /// Hash of the config that shaped the parameters (encoder config for
    /// pretraining, full model config for fine-tuning).
    pub config_hash: String,
    pub dtype: String,
    /// The vocabulary the parameters were trained against; absent for the
    /// (label-free) pretraining stage.
    pub vocab: Option<Vocabulary>,
    /// Parameter names, ascending.
    pub params: Vec<String>,
    /// Optimizer step when moments are stored alongside.
    pub adam_step: Option<u64>,
}

/// Everything a checkpoint directory holds.
#[derive(Debug)]
pub struct Checkpoint<T: Scalar> {
    pub meta: CheckpointMeta,
    pub params: Params<T>,
    pub adam: Option<AdamState<T>>,
}

/// Hex SHA-256 of a config's canonical JSON; structs serialize with fixed
/// field order, so equal configs hash equally.
pub fn config_hash<C: serde::Serialize>(cfg: &C) -> String {
    let json = serde_json::to_vec(cfg).expect("config serialization cannot fail");
    let digest = sha2::Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

const META_FILE: &str = "meta.json";

fn dtype_name<T: Scalar>() -> String {
    format!("{:?}", T::DTYPE).to_lowercase()
}

fn tensor_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.mpet"))
}

/// Write a checkpoint directory: `meta.json`, one `.mpet` file per
/// parameter, and optimizer moments when given. Save → load → save is
/// byte-identical.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    stage: &str,
    step: u64,
    config_hash: &str,
    vocab: Option<&Vocabulary>,
    params: &Params<T>,
    adam: Option<&AdamState<T>>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, tensor) in params {
        save_tensor(&tensor_file(dir, name), tensor)?;
    }
    if let Some(state) = adam {
        let m_dir = dir.join("adam_m");
        let v_dir = dir.join("adam_v");
        std::fs::create_dir_all(&m_dir)?;
        std::fs::create_dir_all(&v_dir)?;
        for (name, m, v) in state.moments() {
            save_tensor(&tensor_file(&m_dir, name), m)?;
            save_tensor(&tensor_file(&v_dir, name), v)?;
        }
    }
    let meta = CheckpointMeta {
        stage: stage.to_string(),
        step,
        config_hash: config_hash.to_string(),
        dtype: dtype_name::<T>(),
        vocab: vocab.cloned(),
        params: params.keys().cloned().collect(),
        adam_step: adam.map(|s| s.step_count()),
    };
    // Written last: its presence marks the directory complete.
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    std::fs::write(dir.join(META_FILE), json)?;
    Ok(())
}

/// Read a checkpoint directory back. When `expect_hash` is given and does
/// not match the stored hash, loading fails unless `force` is set.
pub fn load_checkpoint<T: Scalar>(
    dir: &Path,
    expect_hash: Option<&str>,
    force: bool,
) -> Result<Checkpoint<T>> {
    let meta_path = dir.join(META_FILE);
    let json = std::fs::read_to_string(&meta_path).map_err(|e| {
        TrainingError::Checkpoint(format!("cannot read {}: {e}", meta_path.display()))
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&json)?;
    if let Some(expected) = expect_hash {
        if expected != meta.config_hash && !force {
            return Err(TrainingError::HashMismatch {
                expected: expected.to_string(),
                found: meta.config_hash.clone(),
            });
        }
    }
    let want_dtype = dtype_name::<T>();
    if meta.dtype != want_dtype {
        return Err(TrainingError::Checkpoint(format!(
            "checkpoint holds {} tensors, caller expects {want_dtype}",
            meta.dtype
        )));
    }
    let mut params = Params::new();
    for name in &meta.params {
        let t = load_tensor::<T>(&tensor_file(dir, name)).map_err(|e| {
            TrainingError::Checkpoint(format!("parameter {name}: {e}"))
        })?;
        params.insert(name.clone(), t);
    }
    let adam = match meta.adam_step {
        Some(step) => {
            let mut m = Params::new();
            let mut v = Params::new();
            for name in &meta.params {
                let m_path = tensor_file(&dir.join("adam_m"), name);
                // Frozen parameters accumulate no moments; absent is fine.
                if m_path.exists() {
                    m.insert(name.clone(), load_tensor::<T>(&m_path)?);
                    v.insert(name.clone(), load_tensor::<T>(&tensor_file(&dir.join("adam_v"), name))?);
                }
            }
            Some(AdamState::restore(step, m, v))
        }
        None => None,
    };
    Ok(Checkpoint { meta, params, adam })
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

/// Outcome of a pretraining run: parameter snapshots at the points the
/// pipeline consumes (initialization, end of the first epoch, best
/// validation, final), plus the loss log.
pub struct PretrainRun<T: Scalar> {
    pub final_params: Params<T>,
    pub best_params: Params<T>,
    /// Snapshot at the end of the first epoch (or at the end of the run if
    /// it stopped earlier) — the "before" of the attention diagnostic.
    pub epoch1_params: Params<T>,
    /// Step the epoch-1 snapshot was taken at.
    pub epoch1_step: u64,
    pub best_step: u64,
    pub best_val: f64,
    pub initial_val: f64,
    pub steps: u64,
    /// True when a non-finite loss or gradient stopped the run; snapshots
    /// hold the last good parameters.
    pub diverged: bool,
    pub rows: Vec<LossRow>,
    pub adam: AdamState<T>,
}

/// Deterministic validation split: `round(val_fraction · n)` utterances
/// (at least 1 when the fraction is positive), chosen by a seeded shuffle.
fn split_validation(
    n: usize,
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    Stream::derived(seed, "val_split", &[]).shuffle(&mut order);
    let mut k = (val_fraction * n as f64).round() as usize;
    if val_fraction > 0.0 {
        k = k.clamp(1, n.saturating_sub(1));
    }
    let mut val: Vec<usize> = order[..k].to_vec();
    let mut train: Vec<usize> = order[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Mask plans for every utterance of a batch, drawn from per-row substreams
/// of `(seed, tag, salt, row)`.
fn batch_mask_plans(
    batch_lengths: &[usize],
    cfg: &EncoderConfig,
    seed: u64,
    tag: &str,
    salt: u64,
) -> Vec<MaskPlan> {
    batch_lengths
        .iter()
        .enumerate()
        .map(|(row, &t)| {
            let mut stream = Stream::derived(seed, tag, &[salt, row as u64]);
            MaskPlan::generate(downsampled_len(t), cfg, &mut stream)
        })
        .collect()
}

/// Mean reconstruction loss over the validation batches with fixed masks —
/// the early-stopping criterion. No dropout, masks constant across calls.
fn validation_loss<T: Scalar>(
    encoder: &MpeEncoder,
    params: &Params<T>,
    val_batches: &[Batch<T>],
    mode: ReconstructionMode,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (vb, batch) in val_batches.iter().enumerate() {
        let mut tape = Tape::<T>::new(seed, 0, false);
        let mut ctx = ParamCtx::new(params);
        let plans = batch_mask_plans(&batch.feature_lengths, &encoder.cfg, seed, "val_mask", vb as u64);
        let loss = encoder.pretrain_loss(&mut tape, &mut ctx, batch, &plans, mode)?;
        total += tape.value(loss).item().to_f64();
    }
    Ok(total / val_batches.len() as f64)
}

/// Masked-reconstruction pretraining. Loops batches → mask → encode →
/// reconstruction loss → clipped Adam step under the Noam schedule; stops at
/// `max_steps` or when validation fails to improve by `min_delta` for
/// `patience` consecutive evaluations. A non-finite loss or gradient aborts
/// the run with the last good parameters retained.
pub fn pretrain<T: Scalar>(
    encoder_cfg: &EncoderConfig,
    train_cfg: &TrainConfig,
    corpus: &[FeatureSequence],
    seed: u64,
) -> Result<PretrainRun<T>> {
    train_cfg.validate()?;
    let mode = train_cfg.reconstruction_mode()?;
    if corpus.is_empty() {
        return Err(config_err("pretraining corpus is empty"));
    }
    // Fail fast instead of crashing whenever an epoch shuffle happens to
    // group unmaskable rows into one batch: every utterance must downsample
    // to at least one masked position.
    for u in corpus {
        let ds = downsampled_len(u.duration_frames());
        if MaskPlan::masked_count(ds, encoder_cfg.mask_fraction) == 0 {
            return Err(config_err(format!(
                "utterance {} is too short to pretrain on: {} frames downsample to {ds}, \
                 and round({} × {ds}) = 0 masked positions",
                u.utt_id,
                u.duration_frames(),
                encoder_cfg.mask_fraction
            )));
        }
    }
    let encoder = MpeEncoder::new("mpe", encoder_cfg.clone())?;
    let mut params: Params<T> = Params::new();
    encoder.init(&mut params, seed);
    let schedule = train_cfg.schedule(encoder_cfg.d_model);

    let (train_idx, val_idx) = split_validation(corpus.len(), train_cfg.val_fraction, seed);
    if train_idx.is_empty() {
        return Err(config_err("validation split leaves no training utterances"));
    }
    let val_batches: Vec<Batch<T>> = val_idx
        .chunks(train_cfg.batch_size)
        .map(|chunk| build_batch(corpus, chunk))
        .collect();
    let has_val = !val_batches.is_empty();

    let eval = |params: &Params<T>| -> Result<f64> {
        if has_val {
            validation_loss(&encoder, params, &val_batches, mode, seed)
        } else {
            Ok(f64::NAN)
        }
    };

    let initial_val = eval(&params)?;
    let mut best_val = initial_val;
    let mut best_params = params.clone();
    let mut best_step = 0u64;
    let mut epoch1_params: Option<(Params<T>, u64)> = None;
    let mut adam = AdamState::new();
    let hp = AdamParams::default();
    let mut rows = Vec::new();
    let mut diverged = false;
    let mut stale_evals = 0u64;
    let mut step = 0u64;

    'training: for epoch in 0.. {
        let batches = make_batches_indexed::<T>(corpus, &train_idx, train_cfg.batch_size, epoch, seed);
        for batch in &batches {
            if step == train_cfg.max_steps {
                break 'training;
            }
            step += 1;
            let mut tape = Tape::<T>::new(seed, step, true);
            let mut ctx = ParamCtx::new(&params);
            let plans = batch_mask_plans(&batch.feature_lengths, encoder_cfg, seed, "mask", step);
            let loss = encoder.pretrain_loss(&mut tape, &mut ctx, batch, &plans, mode)?;
            let loss_value = tape.value(loss).item().to_f64();
            if !loss_value.is_finite() {
                diverged = true;
                break 'training;
            }
            let mut grads = match tape.backward(loss) {
                Ok(g) => g,
                Err(NumericsError::NonFiniteGrad { .. }) => {
                    diverged = true;
                    break 'training;
                }
                Err(e) => return Err(e.into()),
            };
            clip_global_norm(&mut grads, train_cfg.clip_norm);
            let lr = schedule.lr(step)?;
            adam_step(&mut params, &grads, &mut adam, &hp, lr, |_| true);

            let mut row = LossRow { step, lr, loss: loss_value, ctc: None, att: None, val: None };
            if has_val && step % train_cfg.eval_every == 0 {
                let val = eval(&params)?;
                row.val = Some(val);
                if best_val - val > train_cfg.min_delta {
                    best_val = val;
                    best_params = params.clone();
                    best_step = step;
                    stale_evals = 0;
                } else {
                    stale_evals += 1;
                    if stale_evals >= train_cfg.patience {
                        rows.push(row);
                        break 'training;
                    }
                }
            }
            rows.push(row);
        }
        if epoch == 0 {
            epoch1_params = Some((params.clone(), step));
        }
        if step == train_cfg.max_steps {
            break;
        }
    }

    // Consider the final parameters for "best" even off the eval cadence.
    if has_val && step > 0 && !diverged {
        let val = eval(&params)?;
        if best_val - val > train_cfg.min_delta {
            best_val = val;
            best_params = params.clone();
            best_step = step;
        }
    }

    let (epoch1_params, epoch1_step) = epoch1_params.unwrap_or_else(|| (params.clone(), step));
    Ok(PretrainRun {
        final_params: params,
        best_params,
        epoch1_params,
        epoch1_step,
        best_step,
        best_val,
        initial_val,
        steps: step,
        diverged,
        rows,
        adam,
    })
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

/// How the supervised stage initializes and which parameters it updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Encoder initialized from the pretrained checkpoint; everything trains.
    Direct,
    /// Encoder initialized from the pretrained checkpoint and excluded from
    /// updates (optionally thawed at the end).
    Frozen,
    /// Random initialization throughout — the no-pretraining baseline.
    Scratch,
}

impl std::str::FromStr for FinetuneMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "direct" => Ok(FinetuneMode::Direct),
            "frozen" => Ok(FinetuneMode::Frozen),
            "scratch" => Ok(FinetuneMode::Scratch),
            other => Err(format!("unknown fine-tuning mode {other:?} (direct|frozen|scratch)")),
        }
    }
}

/// Outcome of a fine-tuning run.
pub struct FinetuneRun<T: Scalar> {
    pub params: Params<T>,
    pub rows: Vec<LossRow>,
    /// Names excluded from updates during the frozen phase (empty for the
    /// other modes).
    pub frozen_names: BTreeSet<String>,
    /// `total parameters − frozen parameters`, counting tensors' elements.
    pub trainable_elements: usize,
    pub total_elements: usize,
    pub steps: u64,
    pub diverged: bool,
    /// Batch rows whose downsampled length could not fit their label
    /// sequence, summed over all steps.
    pub infeasible_total: usize,
    pub adam: AdamState<T>,
}

/// Supervised fine-tuning of the joint CTC/attention objective.
///
/// `pretrained` supplies the encoder initialization for `Direct`/`Frozen`
/// (its non-encoder entries are ignored); `Scratch` must not pass one. In
/// frozen mode the encoder is excluded from updates for `frozen_steps`
/// (default: the whole run), then optionally thawed for `thaw_epochs`
/// epochs of full-model training.
pub fn finetune<T: Scalar>(
    model: &JctModel,
    train_cfg: &TrainConfig,
    corpus: &[FeatureSequence],
    pretrained: Option<&Params<T>>,
    mode: FinetuneMode,
    seed: u64,
) -> Result<FinetuneRun<T>> {
    train_cfg.validate()?;
    if corpus.is_empty() {
        return Err(config_err("fine-tuning corpus is empty"));
    }
    let mut params = model.init_params::<T>(seed);
    let mpe_names = model.mpe_names();
    match (mode, pretrained) {
        (FinetuneMode::Scratch, None) => {}
        (FinetuneMode::Scratch, Some(_)) => {
            return Err(config_err("scratch mode must not be given a pretrained checkpoint"));
        }
        (_, None) => {
            return Err(config_err("direct/frozen modes require a pretrained checkpoint"));
        }
        (_, Some(src)) => {
            for name in &mpe_names {
                let tensor = src.get(name).ok_or_else(|| {
                    TrainingError::Checkpoint(format!("pretrained checkpoint lacks {name}"))
                })?;
                let slot = params.get_mut(name).expect("mpe names come from the model");
                if slot.shape() != tensor.shape() {
                    return Err(TrainingError::Checkpoint(format!(
                        "{name}: checkpoint shape {:?} does not match model shape {:?}",
                        tensor.shape(),
                        slot.shape()
                    )));
                }
                *slot = tensor.clone();
            }
        }
    }

    let frozen_names: BTreeSet<String> =
        if mode == FinetuneMode::Frozen { mpe_names } else { BTreeSet::new() };
    let total_elements: usize = params.values().map(|t| t.numel()).sum();
    let frozen_elements: usize = frozen_names
        .iter()
        .map(|n| params.get(n).map_or(0, |t| t.numel()))
        .sum();

    let frozen_until = match mode {
        FinetuneMode::Frozen => train_cfg.frozen_steps.unwrap_or(train_cfg.max_steps),
        _ => 0,
    };
    let all_idx: Vec<usize> = (0..corpus.len()).collect();
    let steps_per_epoch = corpus.len().div_ceil(train_cfg.batch_size) as u64;
    let total_steps = if mode == FinetuneMode::Frozen && train_cfg.thaw {
        frozen_until + train_cfg.thaw_epochs * steps_per_epoch
    } else {
        train_cfg.max_steps
    };

    let schedule = train_cfg.schedule(model.cfg.encoder.d_model);
    let mut adam = AdamState::new();
    let hp = AdamParams::default();
    let mut rows = Vec::new();
    let mut diverged = false;
    let mut infeasible_total = 0usize;
    let mut step = 0u64;

    'training: for epoch in 0.. {
        let batches =
            make_batches_indexed::<T>(corpus, &all_idx, train_cfg.batch_size, epoch, seed);
        for batch in &batches {
            if step == total_steps {
                break 'training;
            }
            step += 1;
            let mut tape = Tape::<T>::new(seed, step, true);
            let mut ctx = ParamCtx::new(&params);
            let parts = model.joint_loss_batch(&mut tape, &mut ctx, batch)?;
            infeasible_total += parts.infeasible;
            let loss_value = tape.value(parts.loss).item().to_f64();
            if !loss_value.is_finite() {
                diverged = true;
                break 'training;
            }
            let mut grads = match tape.backward(parts.loss) {
                Ok(g) => g,
                Err(NumericsError::NonFiniteGrad { .. }) => {
                    diverged = true;
                    break 'training;
                }
                Err(e) => return Err(e.into()),
            };
            clip_global_norm(&mut grads, train_cfg.clip_norm);
            let lr = schedule.lr(step)?;
            let in_frozen_phase = mode == FinetuneMode::Frozen && step <= frozen_until;
            adam_step(&mut params, &grads, &mut adam, &hp, lr, |name| {
                !(in_frozen_phase && is_mpe_param(name))
            });
            rows.push(LossRow {
                step,
                lr,
                loss: loss_value,
                ctc: Some(parts.ctc_value),
                att: Some(parts.att_value),
                val: None,
            });
        }
        if step == total_steps {
            break;
        }
    }

    Ok(FinetuneRun {
        params,
        rows,
        frozen_names,
        trainable_elements: total_elements - frozen_elements,
        total_elements,
        steps: step,
        diverged,
        infeasible_total,
        adam,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Minimum edit distance (substitutions + insertions + deletions) between
/// two token sequences.
pub fn levenshtein<Tok: PartialEq>(reference: &[Tok], hypothesis: &[Tok]) -> usize {
    let (r, h) = (reference.len(), hypothesis.len());
    let mut prev: Vec<usize> = (0..=h).collect();
    let mut cur = vec![0usize; h + 1];
    for i in 1..=r {
        cur[0] = i;
        for j in 1..=h {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[h]
}

/// One utterance's decoding result.
#[derive(Debug, Clone)]
pub struct UttEval {
    pub utt_id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub errors: usize,
    pub score_att: f64,
    pub score_ctc: f64,
}

/// Corpus-level error-rate report.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// `total_errors / total_ref_tokens` (may exceed 1 with many insertions).
    pub wer: f64,
    pub total_errors: usize,
    pub total_ref_tokens: usize,
    pub utterances: Vec<UttEval>,
}

/// Decode every utterance with the configured beam and score against the
/// references. Utterances decode independently (in parallel when the
/// `parallel` feature is on) against the fixed parameters.
pub fn evaluate<T: Scalar>(
    model: &JctModel,
    params: &Params<T>,
    corpus: &[FeatureSequence],
    opts: &BeamOpts,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(config_err("evaluation corpus is empty"));
    }
    let results = crate::numerics::par::map_indexed(corpus.len(), |i| -> Result<UttEval> {
        let batch = build_batch::<T>(corpus, &[i]);
        let out = model.decode_utterance(params, &batch, opts)?;
        let best = out
            .hypotheses
            .first()
            .ok_or_else(|| config_err("beam search returned no hypotheses"))?;
        let reference = corpus[i].transcript.clone();
        let hypothesis = best.emitted().to_vec();
        let errors = levenshtein(&reference, &hypothesis);
        Ok(UttEval {
            utt_id: corpus[i].utt_id.clone(),
            reference,
            hypothesis,
            errors,
            score_att: best.score_att,
            score_ctc: best.score_ctc,
        })
    });
    let utterances: Vec<UttEval> = results.into_iter().collect::<Result<_>>()?;
    let total_errors: usize = utterances.iter().map(|u| u.errors).sum();
    let total_ref_tokens: usize = utterances.iter().map(|u| u.reference.len()).sum();
    if total_ref_tokens == 0 {
        return Err(config_err("evaluation corpus has no reference tokens"));
    }
    Ok(EvalReport {
        wer: total_errors as f64 / total_ref_tokens as f64,
        total_errors,
        total_ref_tokens,
        utterances,
    })
}

/// The paper-style protocol: WERs from runs with different seeds plus their
/// mean.
pub fn mean_wer(wers: &[f64]) -> f64 {
    wers.iter().sum::<f64>() / wers.len() as f64
}

/// Sanity guard used by the loops' callers: all-finite parameters.
pub fn params_all_finite<T: Scalar>(params: &Params<T>) -> bool {
    params.values().all(|t| t.all_finite())
}

/// True when every target token is a real (non-reserved) token — a
/// prerequisite for CTC training, where `BLANK` must never appear in labels.
pub fn targets_valid(corpus: &[FeatureSequence], vocab: &Vocabulary) -> bool {
    corpus.iter().all(|u| {
        u.transcript
            .iter()
            .all(|&t| t >= Vocabulary::FIRST_TOKEN && t < vocab.size() && t != BLANK)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::features::{prepare_corpus, synthesize_corpus, SynthesisConfig};
    use crate::model::ModelConfig;

    fn tiny_encoder_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            heads: 2,
            blocks: 1,
            d_ff: 16,
            conv_channels: (2, 3),
            input_bins: 8,
            ..Default::default()
        }
    }

    fn tiny_corpus(n: usize) -> (Vec<FeatureSequence>, Vocabulary) {
        let (mut corpus, vocab) = synthesize_corpus(
            &SynthesisConfig {
                num_utterances: n as u64 as usize,
                alphabet_size: 5,
                base_bins: 8,
                min_tokens: 3,
                max_tokens: 5,
                frames_per_token: 6,
                ..Default::default()
            },
            99,
        );
        prepare_corpus(&mut corpus).unwrap();
        (corpus, vocab)
    }

    #[test]
    fn noam_matches_independent_recomputation() {
        // Recompute through a differently factored expression.
        let alt = |k: f64, d: f64, w: f64, n: f64| {
            let ramp = n / (w * w.sqrt());
            let decay = 1.0 / n.sqrt();
            k / d.sqrt() * if ramp < decay { ramp } else { decay }
        };
        let mut stream = Stream::from_seed(4);
        for _ in 0..200 {
            let k = stream.uniform_in(0.1, 10.0);
            let d = 1 + stream.below(1024);
            let w = 1 + stream.below(30_000) as u64;
            let n = 1 + stream.below(100_000) as u64;
            let got = noam_lr(k, d, w, n).unwrap();
            let want = alt(k, d as f64, w as f64, n as f64);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn noam_hits_the_reference_point() {
        // k=10, d=512, warmup=25000 evaluated at the warmup step.
        let lr = noam_lr(10.0, 512, 25_000, 25_000).unwrap();
        assert!((lr - 2.795e-3).abs() < 1e-6, "lr = {lr}");
    }

    #[test]
    fn noam_ramp_is_linear_and_peak_is_at_warmup() {
        let s = Schedule { k: 2.0, d_model: 64, warmup: 400 };
        let half = s.lr(200).unwrap();
        let peak = s.lr(400).unwrap();
        assert!((half - 0.5 * peak).abs() < 1e-15);
        // Exhaustive integer scan at desk scale.
        let best = (1..=4000).max_by(|&a, &b| {
            s.lr(a).unwrap().partial_cmp(&s.lr(b).unwrap()).unwrap()
        });
        assert_eq!(best, Some(400));
        // Strictly decreasing after warmup.
        for n in 400..1000u64 {
            assert!(s.lr(n).unwrap() > s.lr(n + 1).unwrap());
        }
    }

    #[test]
    fn noam_rejects_step_zero() {
        assert!(noam_lr(2.0, 64, 400, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a");
        let second = dir.path().join("b");
        let cfg = tiny_encoder_cfg();
        let encoder = MpeEncoder::new("mpe", cfg.clone()).unwrap();
        let mut params: Params<f64> = Params::new();
        encoder.init(&mut params, 5);
        // Give Adam real state by taking one step.
        let (corpus, _) = tiny_corpus(2);
        let batch = build_batch::<f64>(&corpus, &[0, 1]);
        let mut tape = Tape::new(5, 1, true);
        let mut ctx = ParamCtx::new(&params);
        let plans = batch_mask_plans(&batch.feature_lengths, &cfg, 5, "mask", 1);
        let loss = encoder
            .pretrain_loss(&mut tape, &mut ctx, &batch, &plans, ReconstructionMode::Masked)
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut adam = AdamState::new();
        adam_step(&mut params, &grads, &mut adam, &AdamParams::default(), 1e-3, |_| true);

        let hash = config_hash(&cfg);
        let vocab = Vocabulary::from_transcripts(["ab"]);
        save_checkpoint(&first, "pretrain", 1, &hash, Some(&vocab), &params, Some(&adam)).unwrap();
        let loaded = load_checkpoint::<f64>(&first, Some(&hash), false).unwrap();
        assert_eq!(loaded.meta.step, 1);
        assert_eq!(loaded.meta.vocab.as_ref().unwrap().size(), vocab.size());
        save_checkpoint(
            &second,
            "pretrain",
            1,
            &hash,
            loaded.meta.vocab.as_ref(),
            &loaded.params,
            loaded.adam.as_ref(),
        )
        .unwrap();

        let mut names: Vec<PathBuf> = Vec::new();
        for entry in walk(&first) {
            names.push(entry.strip_prefix(&first).unwrap().to_path_buf());
        }
        assert!(names.len() > 3);
        for rel in names {
            let a = std::fs::read(first.join(&rel)).unwrap();
            let b = std::fs::read(second.join(&rel)).unwrap();
            assert_eq!(a, b, "{} differs after round trip", rel.display());
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn checkpoint_hash_mismatch_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_encoder_cfg();
        let encoder = MpeEncoder::new("mpe", cfg.clone()).unwrap();
        let mut params: Params<f64> = Params::new();
        encoder.init(&mut params, 5);
        save_checkpoint(dir.path(), "pretrain", 0, &config_hash(&cfg), None, &params, None).unwrap();

        let err = load_checkpoint::<f64>(dir.path(), Some("deadbeef"), false).unwrap_err();
        assert!(matches!(err, TrainingError::HashMismatch { .. }));
        let ok = load_checkpoint::<f64>(dir.path(), Some("deadbeef"), true).unwrap();
        assert_eq!(ok.params.len(), params.len());
        // And the stored hash passes without force.
        load_checkpoint::<f64>(dir.path(), Some(&config_hash(&cfg)), false).unwrap();
    }

    #[test]
    fn pretrain_zero_steps_equals_initialization() {
        let (corpus, _) = tiny_corpus(6);
        let cfg = tiny_encoder_cfg();
        let train = TrainConfig { max_steps: 0, ..Default::default() };
        let run = pretrain::<f64>(&cfg, &train, &corpus, 123).unwrap();
        let encoder = MpeEncoder::new("mpe", cfg).unwrap();
        let mut init: Params<f64> = Params::new();
        encoder.init(&mut init, 123);
        assert_eq!(run.steps, 0);
        for (name, t) in &init {
            let got = run.best_params.get(name).unwrap();
            assert_eq!(got.data(), t.data(), "{name} deviates from initialization");
        }
        assert_eq!(run.best_params.len(), init.len());
    }

    #[test]
    fn pretrain_improves_validation_and_is_deterministic() {
        let (corpus, _) = tiny_corpus(8);
        let cfg = tiny_encoder_cfg();
        let train = TrainConfig {
            max_steps: 30,
            batch_size: 4,
            eval_every: 10,
            warmup: 20,
            lr_k: 1.0,
            val_fraction: 0.25,
            ..Default::default()
        };
        let run1 = pretrain::<f64>(&cfg, &train, &corpus, 7).unwrap();
        assert!(!run1.diverged);
        assert_eq!(run1.steps, 30);
        assert!(
            run1.best_val < run1.initial_val,
            "validation did not improve: {} -> {}",
            run1.initial_val,
            run1.best_val
        );
        assert_eq!(run1.rows.len(), 30);

        let run2 = pretrain::<f64>(&cfg, &train, &corpus, 7).unwrap();
        for (name, t) in &run1.final_params {
            let u = run2.final_params.get(name).unwrap();
            let same = t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{name} differs between identical runs");
        }
        assert_eq!(loss_csv(&run1.rows), loss_csv(&run2.rows));
    }

    fn tiny_model(vocab: &Vocabulary) -> JctModel {
        let cfg = ModelConfig {
            encoder: tiny_encoder_cfg(),
            decoder: DecoderConfig { blocks: 1, heads: 2, d_model: 8, d_ff: 16, ..Default::default() },
        };
        JctModel::new(cfg, vocab.clone()).unwrap()
    }

    #[test]
    fn frozen_finetune_keeps_encoder_bits_and_counts_trainables() {
        let (corpus, vocab) = tiny_corpus(6);
        let model = tiny_model(&vocab);
        let mut pretrained: Params<f64> = Params::new();
        model.encoder.init(&mut pretrained, 41);
        let train = TrainConfig { max_steps: 4, batch_size: 3, ..Default::default() };
        let run = finetune(&model, &train, &corpus, Some(&pretrained), FinetuneMode::Frozen, 9).unwrap();
        assert_eq!(run.steps, 4);
        assert_eq!(run.frozen_names, model.mpe_names());
        for name in &run.frozen_names {
            let before = pretrained.get(name).unwrap();
            let after = run.params.get(name).unwrap();
            let same = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{name} changed during the frozen phase");
        }
        let mpe_elements: usize = run.frozen_names.iter().map(|n| run.params.get(n).unwrap().numel()).sum();
        assert_eq!(run.trainable_elements, run.total_elements - mpe_elements);
        // The unfrozen parts did move.
        let model2 = tiny_model(&vocab);
        let fresh = model2.init_params::<f64>(9);
        let moved = run
            .params
            .iter()
            .filter(|(n, _)| !is_mpe_param(n))
            .any(|(n, t)| t.data() != fresh.get(n).unwrap().data());
        assert!(moved, "no non-encoder parameter changed");
    }

    #[test]
    fn finetune_mode_preconditions() {
        let (corpus, vocab) = tiny_corpus(4);
        let model = tiny_model(&vocab);
        let train = TrainConfig { max_steps: 1, ..Default::default() };
        assert!(finetune::<f64>(&model, &train, &corpus, None, FinetuneMode::Direct, 1).is_err());
        assert!(finetune::<f64>(&model, &train, &corpus, None, FinetuneMode::Frozen, 1).is_err());
        let junk = model.init_params::<f64>(2);
        assert!(finetune(&model, &train, &corpus, Some(&junk), FinetuneMode::Scratch, 1).is_err());
        assert!(finetune::<f64>(&model, &train, &corpus, None, FinetuneMode::Scratch, 1).is_ok());
    }

    #[test]
    fn levenshtein_matches_the_worked_examples() {
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        let r = split("a b c");
        assert_eq!(levenshtein(&r, &split("a b c")), 0);
        // One substitution (b→x) plus one insertion (d): 2 errors over 3
        // reference tokens ≈ 66.7%.
        assert_eq!(levenshtein(&r, &split("a x c d")), 2);
        let empty: Vec<String> = Vec::new();
        assert_eq!(levenshtein(&r, &empty), 3);
        assert_eq!(levenshtein(&empty, &r), 3);
        assert_eq!(levenshtein(&r, &split("x y")), 3);
    }

    #[test]
    fn evaluate_reports_wer_over_the_corpus() {
        let (corpus, vocab) = tiny_corpus(3);
        let model = tiny_model(&vocab);
        let params = model.init_params::<f64>(3);
        let opts = BeamOpts { beam_width: 2, ctc_weight: 0.3, max_len: 8 };
        let report = evaluate(&model, &params, &corpus, &opts).unwrap();
        assert_eq!(report.utterances.len(), 3);
        assert!(report.total_ref_tokens > 0);
        let sum: usize = report.utterances.iter().map(|u| u.errors).sum();
        assert_eq!(report.total_errors, sum);
        assert!((report.wer - sum as f64 / report.total_ref_tokens as f64).abs() < 1e-15);
        for u in &report.utterances {
            assert!(targets_valid(&corpus, &vocab));
            assert_eq!(u.errors, levenshtein(&u.reference, &u.hypothesis));
        }
    }

    #[test]
    fn validation_split_is_deterministic_and_disjoint() {
        let (t1, v1) = split_validation(32, 0.125, 5);
        let (t2, v2) = split_validation(32, 0.125, 5);
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!(v1.len(), 4);
        assert_eq!(t1.len() + v1.len(), 32);
        for i in &v1 {
            assert!(!t1.contains(i));
        }
        let (t3, v3) = split_validation(32, 0.125, 6);
        assert!(v3 != v1 || t3 != t1, "different seeds should split differently");
        // Tiny corpora still keep at least one utterance on each side.
        let (t4, v4) = split_validation(2, 0.125, 5);
        assert_eq!(t4.len(), 1);
        assert_eq!(v4.len(), 1);
    }
}
