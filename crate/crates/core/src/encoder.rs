//! The pretrainable encoder: convolutional downsampler, downsampled-frame
//! masking, sinusoidal positions, a bidirectional transformer stack, and the
//! masked-reconstruction objective.

use std::collections::BTreeMap;

use crate::features::Batch;
use crate::nn::{key_padding_mask, EncoderBlock, Linear, ParamCtx, Params};
use crate::numerics::rng::Stream;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::{NumericsError, Result};

fn invalid(op: &'static str, msg: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument { op, msg: msg.into() }
}

/// Encoder hyperparameters. Defaults are desk scale; every field scales up
/// to the reference configuration (d_model 512, d_ff 2048, channels 64/128).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub d_ff: usize,
    /// Output channels of the two conv layers.
    pub conv_channels: (usize, usize),
    /// Filterbank bins per input channel.
    pub input_bins: usize,
    /// Input channels (static, Δ, ΔΔ).
    pub input_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dropout: f64,
    /// Fraction of downsampled frames chosen for masking.
    pub mask_fraction: f64,
    /// P(action = zero) for a chosen frame.
    pub mask_zero_prob: f64,
    /// P(action = swap); the remainder keeps the frame.
    pub mask_swap_prob: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            heads: 4,
            blocks: 4,
            d_ff: 256,
            conv_channels: (16, 32),
            input_bins: 80,
            input_channels: 3,
            kernel: 3,
            stride: 2,
            dropout: 0.1,
            mask_fraction: 0.15,
            mask_zero_prob: 0.8,
            mask_swap_prob: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.input_channels * self.input_bins
    }
}

/// Frame count after the two stride-2 convolutions.
pub fn downsampled_len(t: usize) -> usize {
    t.div_ceil(2).div_ceil(2)
}

/// Length after one conv layer (kernel 3, stride 2, padding 1).
fn conv_len(t: usize) -> usize {
    t.div_ceil(2)
}

/// What happens to one chosen frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    /// Replace the frame with a zero vector.
    Zero,
    /// Replace the frame with the frame at this position of the same
    /// utterance.
    Swap(usize),
    /// Leave the frame unchanged (it still counts as a masked position for
    /// the reconstruction loss).
    Keep,
}

/// A deterministic masking decision for one utterance of `t_len`
/// downsampled frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub t_len: usize,
    /// Ascending by frame index.
    pub actions: BTreeMap<usize, MaskAction>,
}

impl MaskPlan {
    /// Number of frames a plan masks for a given length and fraction.
    pub fn masked_count(t_len: usize, fraction: f64) -> usize {
        (fraction * t_len as f64).round() as usize
    }

    pub fn empty(t_len: usize) -> Self {
        MaskPlan { t_len, actions: BTreeMap::new() }
    }

    /// Draw a plan: `round(fraction·t_len)` distinct frames, each assigned
    /// zero / swap / keep with the configured probabilities. Swap sources
    /// are uniform positions of the same utterance.
    pub fn generate(t_len: usize, cfg: &EncoderConfig, stream: &mut Stream) -> Self {
        let count = Self::masked_count(t_len, cfg.mask_fraction).min(t_len);
        let mut indices = stream.sample_indices(t_len, count);
        indices.sort_unstable();
        let mut actions = BTreeMap::new();
        for i in indices {
            let u = stream.uniform();
            let action = if u < cfg.mask_zero_prob {
                MaskAction::Zero
            } else if u < cfg.mask_zero_prob + cfg.mask_swap_prob {
                MaskAction::Swap(stream.below(t_len))
            } else {
                MaskAction::Keep
            };
            actions.insert(i, action);
        }
        MaskPlan { t_len, actions }
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn masked_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.actions.keys().copied()
    }

    fn validate(&self, t_len: usize) -> Result<()> {
        if self.t_len != t_len {
            return Err(invalid("apply_mask", format!("plan for {} frames applied to {t_len}", self.t_len)));
        }
        for (&i, action) in &self.actions {
            if i >= t_len {
                return Err(invalid("apply_mask", format!("masked index {i} out of {t_len}")));
            }
            if let MaskAction::Swap(s) = action {
                if *s >= t_len {
                    return Err(invalid("apply_mask", format!("swap source {s} out of {t_len}")));
                }
            }
        }
        Ok(())
    }
}

/// Apply a plan to one utterance's `t × d` representation. The input is
/// untouched; masked rows are zeroed/swapped/kept in the returned copy.
pub fn apply_mask<T: Scalar>(h_clean: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
    let t_len = h_clean.shape()[0];
    plan.validate(t_len)?;
    let d = h_clean.shape()[1];
    let mut out = h_clean.clone();
    for (&i, action) in &plan.actions {
        match action {
            MaskAction::Zero => {
                out.data_mut()[i * d..(i + 1) * d].fill(T::zero());
            }
            MaskAction::Swap(s) => {
                let src: Vec<T> = h_clean.data()[s * d..(s + 1) * d].to_vec();
                out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&src);
            }
            MaskAction::Keep => {}
        }
    }
    Ok(out)
}

/// Flat row-source table realizing per-utterance plans on a padded
/// `B × t_max × d` tensor (for [`Tape::mask_rows`]). Unmasked and padded
/// rows map to themselves.
pub fn batch_row_sources(plans: &[MaskPlan], t_max: usize) -> Result<Vec<Option<usize>>> {
    let mut sources: Vec<Option<usize>> = (0..plans.len() * t_max).map(Some).collect();
    for (b, plan) in plans.iter().enumerate() {
        if plan.t_len > t_max {
            return Err(invalid("apply_mask", format!("plan length {} exceeds t_max {t_max}", plan.t_len)));
        }
        plan.validate(plan.t_len)?;
        for (&i, action) in &plan.actions {
            sources[b * t_max + i] = match action {
                MaskAction::Zero => None,
                MaskAction::Swap(s) => Some(b * t_max + s),
                MaskAction::Keep => Some(b * t_max + i),
            };
        }
    }
    Ok(sources)
}

/// Standard sinusoidal positions: `PE(pos, 2i) = sin(pos/10000^{2i/d})`,
/// `PE(pos, 2i+1) = cos(·)`.
pub fn positional_encoding<T: Scalar>(t_len: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model % 2 != 0 {
        return Err(invalid("positional_encoding", format!("d_model {d_model} must be even")));
    }
    let mut data = vec![T::zero(); t_len * d_model];
    for pos in 0..t_len {
        for i in 0..d_model / 2 {
            let rate = (10000f64).powf(2.0 * i as f64 / d_model as f64);
            let angle = pos as f64 / rate;
            data[pos * d_model + 2 * i] = T::from_f64(angle.sin());
            data[pos * d_model + 2 * i + 1] = T::from_f64(angle.cos());
        }
    }
    Ok(Tensor::new(vec![t_len, d_model], data))
}

/// Which downsampled positions the reconstruction loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconstructionMode {
    /// Positions chosen by the mask plans (default).
    Masked,
    /// Valid positions the plans left alone.
    Unmasked,
    /// Every valid position.
    All,
}

impl std::str::FromStr for ReconstructionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "masked" => Ok(ReconstructionMode::Masked),
            "unmasked" => Ok(ReconstructionMode::Unmasked),
            "all" => Ok(ReconstructionMode::All),
            other => Err(format!("unknown reconstruction mode {other:?} (masked|unmasked|all)")),
        }
    }
}

/// Result of encoding a (possibly padded) batch.
pub struct Encoded<T: Scalar> {
    /// `B × T × d_model` representations.
    pub e: Var,
    /// Valid downsampled length per utterance.
    pub ds_lengths: Vec<usize>,
    /// Per-layer post-softmax self-attention weights
    /// (`B × heads × T × T`), retained on request.
    pub attention: Vec<Tensor<T>>,
}

/// Conv downsampler + transformer stack with parameters under `prefix.`.
#[derive(Debug, Clone)]
pub struct MpeEncoder {
    pub cfg: EncoderConfig,
    prefix: String,
    blocks: Vec<EncoderBlock>,
    proj: Linear,
}

impl MpeEncoder {
    pub fn new(prefix: &str, cfg: EncoderConfig) -> Result<Self> {
        if cfg.d_model % 2 != 0 {
            return Err(invalid("encoder_config", "d_model must be even for sinusoidal positions"));
        }
        let blocks = (0..cfg.blocks)
            .map(|i| EncoderBlock::new(&format!("{prefix}.blk{i}"), cfg.d_model, cfg.heads, cfg.d_ff))
            .collect::<Result<Vec<_>>>()?;
        let flat = cfg.conv_channels.1 * downsampled_len_bins(cfg.input_bins);
        let proj = Linear::new(format!("{prefix}.proj"), flat, cfg.d_model);
        Ok(MpeEncoder { cfg, prefix: prefix.to_string(), blocks, proj })
    }

    fn conv_name(&self, i: usize) -> String {
        format!("{}.conv{i}", self.prefix)
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, root_seed: u64) {
        let (c1, c2) = self.cfg.conv_channels;
        crate::nn::init_conv2d(params, root_seed, &self.conv_name(1), c1, self.cfg.input_channels, self.cfg.kernel);
        crate::nn::init_conv2d(params, root_seed, &self.conv_name(2), c2, c1, self.cfg.kernel);
        self.proj.init(params, root_seed);
        for b in &self.blocks {
            b.init(params, root_seed);
        }
    }

    /// Every parameter name the encoder owns (the pretrained set).
    pub fn names(&self) -> Vec<String> {
        let mut out = vec![
            format!("{}.w", self.conv_name(1)),
            format!("{}.b", self.conv_name(1)),
            format!("{}.w", self.conv_name(2)),
            format!("{}.b", self.conv_name(2)),
        ];
        out.extend(self.proj.names());
        for b in &self.blocks {
            out.extend(b.names());
        }
        out
    }

    /// Conv stack + projection: `B × t × D_in` → `B × T × d_model` with
    /// per-utterance valid lengths. Rows beyond an utterance's valid length
    /// are exactly zero (conv outputs at padded times are cleared after
    /// each stage so batch packing never bleeds into real frames).
    pub fn downsample<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ParamCtx<'_, T>,
        features: Var,
        lengths: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        let shape = tape.value(features).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.input_dim() {
            return Err(invalid(
                "downsample",
                format!("expected B × t × {}, got {shape:?}", self.cfg.input_dim()),
            ));
        }
        let (b, t) = (shape[0], shape[1]);
        let (c_in, bins) = (self.cfg.input_channels, self.cfg.input_bins);

        // B × t × (C·bins) → B × C × t × bins.
        let x = tape.reshape(features, &[b, t, c_in, bins])?;
        let x = tape.transpose(x, 1, 2)?;

        let l1: Vec<usize> = lengths.iter().map(|&l| conv_len(l)).collect();
        let l2: Vec<usize> = l1.iter().map(|&l| conv_len(l)).collect();

        let w1 = ctx.var(tape, &format!("{}.w", self.conv_name(1)))?;
        let b1 = ctx.var(tape, &format!("{}.b", self.conv_name(1)))?;
        let x = tape.conv2d(x, w1, b1, self.cfg.stride, 1)?;
        let x = tape.relu(x)?;
        let x = self.clear_invalid_times(tape, x, &l1)?;

        let w2 = ctx.var(tape, &format!("{}.w", self.conv_name(2)))?;
        let b2 = ctx.var(tape, &format!("{}.b", self.conv_name(2)))?;
        let x = tape.conv2d(x, w2, b2, self.cfg.stride, 1)?;
        let x = tape.relu(x)?;
        let x = self.clear_invalid_times(tape, x, &l2)?;

        // B × C2 × T × bins2 → B × T × (C2·bins2) → project.
        let s = tape.value(x).shape().to_vec();
        let x = tape.transpose(x, 1, 2)?;
        let x = tape.reshape(x, &[s[0], s[2], s[1] * s[3]])?;
        let h = self.proj.forward(tape, ctx, x)?;
        // The projection bias revives padded rows; clear them again.
        let valid = crate::nn::time_validity_mask::<T>(&l2, s[2]);
        let valid = tape.constant(&valid)?;
        let h = tape.mul(h, valid)?;
        Ok((h, l2))
    }

    /// Zero conv activations at time rows ≥ the per-utterance valid length
    /// (`x` is `B × C × T × W`).
    fn clear_invalid_times<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, lens: &[usize]) -> Result<Var> {
        let t_len = tape.value(x).shape()[2];
        if lens.iter().all(|&l| l >= t_len) {
            return Ok(x);
        }
        let b = lens.len();
        let mut mask = vec![T::zero(); b * t_len];
        for (i, &l) in lens.iter().enumerate() {
            for t in 0..l.min(t_len) {
                mask[i * t_len + t] = T::one();
            }
        }
        let mask = Tensor::new(vec![b, 1, t_len, 1], mask);
        let m = tape.constant(&mask)?;
        tape.mul(x, m)
    }

    /// Transformer stack over `B × T × d_model` input (already positioned),
    /// attending only to valid key positions.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ParamCtx<'_, T>,
        h_in: Var,
        ds_lengths: &[usize],
        retain_attention: bool,
    ) -> Result<Encoded<T>> {
        let t_max = tape.value(h_in).shape()[1];
        let mask = key_padding_mask::<T>(ds_lengths, t_max);
        let needs_mask = ds_lengths.iter().any(|&l| l < t_max);
        let dropout = if tape.is_training() { self.cfg.dropout } else { 0.0 };
        let mut x = h_in;
        let mut attention = Vec::new();
        for block in &self.blocks {
            let (out, probs) = block.forward(tape, ctx, x, needs_mask.then_some(&mask), dropout)?;
            if retain_attention {
                attention.push(tape.value(probs).clone());
            }
            x = out;
        }
        Ok(Encoded { e: x, ds_lengths: ds_lengths.to_vec(), attention })
    }

    /// Downsample, add positions, and encode — the supervised-path entry
    /// (no masking).
    pub fn encode_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ParamCtx<'_, T>,
        batch: &Batch<T>,
        retain_attention: bool,
    ) -> Result<Encoded<T>> {
        let feats = tape.constant(&batch.features)?;
        let (h, ds_lengths) = self.downsample(tape, ctx, feats, &batch.feature_lengths)?;
        let t_max = tape.value(h).shape()[1];
        let pe = positional_encoding::<T>(t_max, self.cfg.d_model)?;
        let pe = tape.constant(&pe)?;
        let x = tape.add(h, pe)?;
        self.encode(tape, ctx, x, &ds_lengths, retain_attention)
    }

    /// Downsample, mask per the plans, add positions, and encode. Returns
    /// the clean (pre-mask) representation, the encoded output, and the
    /// valid lengths — the raw material of the pretraining objective.
    pub fn masked_encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ParamCtx<'_, T>,
        batch: &Batch<T>,
        plans: &[MaskPlan],
    ) -> Result<(Var, Var, Vec<usize>)> {
        let feats = tape.constant(&batch.features)?;
        let (h_clean, ds_lengths) = self.downsample(tape, ctx, feats, &batch.feature_lengths)?;
        if plans.len() != ds_lengths.len() {
            return Err(invalid("pretrain_loss", format!("{} plans for {} utterances", plans.len(), ds_lengths.len())));
        }
        for (plan, &l) in plans.iter().zip(&ds_lengths) {
            if plan.t_len != l {
                return Err(invalid("pretrain_loss", format!("plan length {} vs downsampled length {l}", plan.t_len)));
            }
        }
        let t_max = tape.value(h_clean).shape()[1];
        let sources = batch_row_sources(plans, t_max)?;
        let h_masked = tape.mask_rows(h_clean, &sources)?;
        let pe = positional_encoding::<T>(t_max, self.cfg.d_model)?;
        let pe = tape.constant(&pe)?;
        let x = tape.add(h_masked, pe)?;
        let encoded = self.encode(tape, ctx, x, &ds_lengths, false)?;
        Ok((h_clean, encoded.e, ds_lengths))
    }

    /// Full pretraining objective for one batch: downsample, snapshot the
    /// clean representation as the (detached) target, mask, encode, and
    /// take the mean absolute error over the positions `mode` selects.
    /// The target is a stop-gradient: reconstruction pulls the encoded
    /// output toward the clean frames, never the frames toward the output.
    pub fn pretrain_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ParamCtx<'_, T>,
        batch: &Batch<T>,
        plans: &[MaskPlan],
        mode: ReconstructionMode,
    ) -> Result<Var> {
        let (h_clean, e, ds_lengths) = self.masked_encode(tape, ctx, batch, plans)?;
        let target = tape.value(h_clean).clone();
        let target = tape.constant(&target)?;
        reconstruction_loss(tape, e, target, plans, &ds_lengths, mode, self.cfg.d_model)
    }
}

/// Downsampled size of the frequency axis after the two stride-2 convs.
fn downsampled_len_bins(bins: usize) -> usize {
    bins.div_ceil(2).div_ceil(2)
}

/// Mean absolute error between `e` and `target` over the rows `mode`
/// selects, per element (row count × d_model).
pub fn reconstruction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    e: Var,
    target: Var,
    plans: &[MaskPlan],
    ds_lengths: &[usize],
    mode: ReconstructionMode,
    d_model: usize,
) -> Result<Var> {
    let t_max = tape.value(e).shape()[1];
    let b = ds_lengths.len();
    let mut select = vec![T::zero(); b * t_max];
    let mut count = 0usize;
    for (i, (plan, &len)) in plans.iter().zip(ds_lengths).enumerate() {
        for t in 0..len.min(t_max) {
            let masked = plan.actions.contains_key(&t);
            let chosen = match mode {
                ReconstructionMode::Masked => masked,
                ReconstructionMode::Unmasked => !masked,
                ReconstructionMode::All => true,
            };
            if chosen {
                select[i * t_max + t] = T::one();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(invalid("reconstruction_loss", format!("mode {mode:?} selects no positions")));
    }
    let select = Tensor::new(vec![b, t_max, 1], select);
    let w = tape.constant(&select)?;
    let diff = tape.sub(e, target)?;
    let diff = tape.abs(diff)?;
    let diff = tape.mul(diff, w)?;
    let total = tape.sum(diff)?;
    tape.scale(total, 1.0 / (count * d_model) as f64)
}

/// Mean attention weight within the |i−j| ≤ `band` diagonal band of one
/// `T × T` attention map, over valid query rows.
pub fn diagonal_band_mass<T: Scalar>(probs: &Tensor<T>, t_valid: usize, band: usize) -> f64 {
    let t_len = probs.shape()[probs.rank() - 1];
    let rows = t_valid.min(t_len);
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..rows {
            if i.abs_diff(j) <= band {
                total += probs.data()[i * t_len + j].to_f64();
            }
        }
    }
    total / rows as f64
}
