//! Autoregressive transformer decoder: causal self-attention over the
//! token prefix, cross-attention over encoder frames, the label-smoothed
//! attention loss, the α-weighted joint objective, and length-synchronous
//! beam search with optional CTC prefix-score fusion.

use crate::ctc::BLANK;
use crate::features::Vocabulary;
use crate::nn::{key_padding_mask, DecoderBlock, Linear, ParamCtx, Params, MASKED_LOGIT};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::{NumericsError, Result};

fn invalid(op: &'static str, msg: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument { op, msg: msg.into() }
}

const NEG_INF: f64 = f64::NEG_INFINITY;

fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Decoder hyperparameters. Defaults are desk scale; the reference
/// configuration (6 blocks, d_model 512, d_ff 2048) is reachable by config.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Label-smoothing mass ε.
    pub label_smoothing: f64,
    /// CTC weight α in the joint objective.
    pub alpha: f64,
    pub beam_width: usize,
    /// CTC prefix-score fusion weight λ at decode time (0 = attention-only).
    pub ctc_fusion_weight: f64,
    /// Hard cap on emitted tokens per utterance.
    pub max_decode_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            blocks: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            dropout: 0.1,
            label_smoothing: 0.1,
            alpha: 0.3,
            beam_width: 10,
            ctc_fusion_weight: 0.3,
            max_decode_len: 50,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid("decoder_config", format!("alpha {} outside [0,1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(invalid("decoder_config", format!("label_smoothing {} outside [0,1)", self.label_smoothing)));
        }
        if !(0.0..=1.0).contains(&self.ctc_fusion_weight) {
            return Err(invalid("decoder_config", format!("ctc_fusion_weight {} outside [0,1]", self.ctc_fusion_weight)));
        }
        if self.beam_width == 0 || self.max_decode_len == 0 {
            return Err(invalid("decoder_config", "beam_width and max_decode_len must be ≥ 1"));
        }
        Ok(())
    }
}

/// Lower-triangular binary mask: row u has ones at columns 0..=u.
pub fn causal_mask(n: usize) -> Tensor<f64> {
    let mut data = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..=u {
            data[u * n + v] = 1.0;
        }
    }
    Tensor::new(vec![n, n], data)
}

/// The same mask as additive attention logits (`1 × 1 × n × n`): 0 where
/// attention is legal, [`MASKED_LOGIT`] on future positions.
pub fn causal_mask_additive<T: Scalar>(n: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * n];
    for u in 0..n {
        for v in u + 1..n {
            data[u * n + v] = T::from_f64(MASKED_LOGIT);
        }
    }
    Tensor::new(vec![1, 1, n, n], data)
}

/// Teacher-forcing views of a padded target batch: decoder inputs are
/// sos-prefixed, loss targets are eos-terminated, and `include` marks the
/// real (non-pad) positions.
#[derive(Debug, Clone)]
pub struct TeacherForcing {
    /// `B × width` flat decoder input ids.
    pub input_ids: Vec<usize>,
    /// `B × width` flat loss targets.
    pub target_ids: Vec<usize>,
    /// `B × width`, true at positions that count toward the loss.
    pub include: Vec<bool>,
    pub rows: usize,
    /// Common padded length (max target length + 1).
    pub width: usize,
}

/// Assemble teacher forcing for a batch of target sequences.
pub fn teacher_forcing(targets: &[&[usize]]) -> TeacherForcing {
    let rows = targets.len();
    let width = targets.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
    let mut input_ids = vec![Vocabulary::PAD; rows * width];
    let mut target_ids = vec![Vocabulary::PAD; rows * width];
    let mut include = vec![false; rows * width];
    for (b, t) in targets.iter().enumerate() {
        input_ids[b * width] = Vocabulary::SOS;
        input_ids[b * width + 1..b * width + 1 + t.len()].copy_from_slice(t);
        target_ids[b * width..b * width + t.len()].copy_from_slice(t);
        target_ids[b * width + t.len()] = Vocabulary::EOS;
        for i in 0..=t.len() {
            include[b * width + i] = true;
        }
    }
    TeacherForcing { input_ids, target_ids, include, rows, width }
}

/// Forward output: logits and (when retained) per-layer attention maps.
pub struct DecodeForward<T: Scalar> {
    /// `B × N × V` unnormalized scores.
    pub logits: Var,
    pub self_attention: Vec<Tensor<T>>,
    pub cross_attention: Vec<Tensor<T>>,
}

/// Transformer decoder with parameters under `prefix.`.
#[derive(Debug, Clone)]
pub struct TransformerDecoder {
    pub cfg: DecoderConfig,
    pub vocab_size: usize,
    prefix: String,
    blocks: Vec<DecoderBlock>,
    out: Linear,
}

impl TransformerDecoder {
    pub fn new(prefix: &str, cfg: DecoderConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        if vocab_size <= Vocabulary::FIRST_TOKEN {
            return Err(invalid("decoder", format!("vocabulary of {vocab_size} has no real tokens")));
        }
        let blocks = (0..cfg.blocks)
            .map(|i| DecoderBlock::new(&format!("{prefix}.blk{i}"), cfg.d_model, cfg.heads, cfg.d_ff))
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::new(format!("{prefix}.out"), cfg.d_model, vocab_size);
        Ok(TransformerDecoder { cfg, vocab_size, prefix: prefix.to_string(), blocks, out })
    }

    fn embed_name(&self) -> String {
        format!("{}.embed", self.prefix)
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, root_seed: u64) {
        crate::nn::init_embedding(params, root_seed, &self.embed_name(), self.vocab_size, self.cfg.d_model);
        for b in &self.blocks {
            b.init(params, root_seed);
        }
        self.out.init(params, root_seed);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec![self.embed_name()];
        for b in &self.blocks {
            out.extend(b.names());
        }
        out.extend(self.out.names());
        out
    }

    /// Run the decoder over `ids` (`rows × width`, sos-prefixed) against
    /// encoder `memory` (`rows × T × d_model`).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ParamCtx<'_, T>,
        memory: Var,
        memory_lengths: &[usize],
        ids: &[usize],
        rows: usize,
        width: usize,
        retain_attention: bool,
    ) -> Result<DecodeForward<T>> {
        if ids.len() != rows * width || width == 0 {
            return Err(invalid("decode_forward", format!("{} ids for {rows} × {width}", ids.len())));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(invalid("decode_forward", format!("token id {bad} outside vocabulary {}", self.vocab_size)));
        }
        let mem_shape = tape.value(memory).shape().to_vec();
        if mem_shape.len() != 3 || mem_shape[0] != rows || mem_shape[2] != self.cfg.d_model {
            return Err(invalid("decode_forward", format!("memory shape {mem_shape:?} vs rows {rows}")));
        }
        let table = ctx.var(tape, &self.embed_name())?;
        let x = tape.embedding(table, ids)?;
        let x = tape.reshape(x, &[rows, width, self.cfg.d_model])?;
        let x = tape.scale(x, (self.cfg.d_model as f64).sqrt())?;
        let pe = crate::encoder::positional_encoding::<T>(width, self.cfg.d_model)?;
        let pe = tape.constant(&pe)?;
        let mut x = tape.add(x, pe)?;

        let self_mask = causal_mask_additive::<T>(width);
        let t_mem = mem_shape[1];
        let cross_mask = key_padding_mask::<T>(memory_lengths, t_mem);
        let needs_cross_mask = memory_lengths.iter().any(|&l| l < t_mem);
        let dropout = if tape.is_training() { self.cfg.dropout } else { 0.0 };

        let mut self_attention = Vec::new();
        let mut cross_attention = Vec::new();
        for block in &self.blocks {
            let (out, sa, ca) = block.forward(
                tape,
                ctx,
                x,
                memory,
                Some(&self_mask),
                needs_cross_mask.then_some(&cross_mask),
                dropout,
            )?;
            if retain_attention {
                self_attention.push(tape.value(sa).clone());
                cross_attention.push(tape.value(ca).clone());
            }
            x = out;
        }
        let logits = self.out.forward(tape, ctx, x)?;
        Ok(DecodeForward { logits, self_attention, cross_attention })
    }

    /// Label-smoothed attention loss for one teacher-forced batch.
    pub fn attention_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ParamCtx<'_, T>,
        memory: Var,
        memory_lengths: &[usize],
        tf: &TeacherForcing,
    ) -> Result<Var> {
        let fwd = self.forward(tape, ctx, memory, memory_lengths, &tf.input_ids, tf.rows, tf.width, false)?;
        let flat = tape.reshape(fwd.logits, &[tf.rows * tf.width, self.vocab_size])?;
        tape.cross_entropy_label_smoothed(flat, &tf.target_ids, &tf.include, self.cfg.label_smoothing)
    }
}

/// The α-weighted joint objective: `α·l_ctc + (1−α)·l_att`.
pub fn joint_loss<T: Scalar>(tape: &mut Tape<T>, l_ctc: Var, l_att: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid("joint_loss", format!("alpha {alpha} outside [0,1]")));
    }
    let a = tape.scale(l_ctc, alpha)?;
    let b = tape.scale(l_att, 1.0 - alpha)?;
    tape.add(a, b)
}

/// One beam-search candidate.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Emitted tokens (no sos; ends with eos once finished).
    pub tokens: Vec<usize>,
    /// Sum of attention log-probabilities.
    pub score_att: f64,
    /// CTC prefix log-probability (0 when fusion is off).
    pub score_ctc: f64,
    /// `(1−λ)·score_att + λ·score_ctc`.
    pub combined: f64,
    ctc_state: Option<CtcPrefixState>,
}

impl Hypothesis {
    pub fn is_finished(&self) -> bool {
        self.tokens.last() == Some(&Vocabulary::EOS)
    }

    /// Token count used for final length normalization (eos included).
    fn len_for_norm(&self) -> usize {
        self.tokens.len().max(1)
    }

    pub fn normalized_score(&self) -> f64 {
        self.combined / self.len_for_norm() as f64
    }

    /// Tokens without the trailing eos.
    pub fn emitted(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == Vocabulary::EOS => rest,
            _ => &self.tokens,
        }
    }
}

/// Per-prefix forward variables of the CTC prefix score: log-probabilities
/// of producing exactly this prefix by each frame, split by whether the
/// last emission was a blank.
#[derive(Debug, Clone)]
struct CtcPrefixState {
    gamma_blank: Vec<f64>,
    gamma_token: Vec<f64>,
    last: Option<usize>,
}

/// Incremental CTC prefix scoring over a `T × V` log-probability matrix.
pub struct CtcPrefixScorer<'a> {
    lp: &'a Tensor<f64>,
    t_len: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(lp: &'a Tensor<f64>) -> Result<Self> {
        if lp.rank() != 2 {
            return Err(invalid("ctc_prefix_score", format!("want T × V, got {:?}", lp.shape())));
        }
        Ok(CtcPrefixScorer { lp, t_len: lp.shape()[0] })
    }

    fn at(&self, t: usize, v: usize) -> f64 {
        self.lp.data()[t * self.lp.shape()[1] + v]
    }

    /// State of the empty prefix: only all-blank paths.
    fn initial(&self) -> CtcPrefixState {
        let mut gamma_blank = vec![NEG_INF; self.t_len];
        let mut acc = 0.0;
        for t in 0..self.t_len {
            acc += self.at(t, BLANK);
            gamma_blank[t] = acc;
        }
        CtcPrefixState { gamma_blank, gamma_token: vec![NEG_INF; self.t_len], last: None }
    }

    /// Extend a prefix with token `c`: returns the prefix score ψ (the log
    /// mass of all frames where `c` can newly appear, including
    /// continuations) and the successor state.
    fn extend(&self, state: &CtcPrefixState, c: usize) -> (f64, CtcPrefixState) {
        let mut gn = vec![NEG_INF; self.t_len];
        let mut gb = vec![NEG_INF; self.t_len];
        let mut psi = NEG_INF;
        for t in 0..self.t_len {
            let (prev_b, prev_n) = if t == 0 {
                (if state.last.is_none() { 0.0 } else { NEG_INF }, NEG_INF)
            } else {
                (state.gamma_blank[t - 1], state.gamma_token[t - 1])
            };
            // New occurrence of c at frame t: after a blank always, after a
            // token only when it differs from c (repeat needs a blank).
            let mut phi = prev_b;
            if state.last != Some(c) {
                phi = log_add(phi, prev_n);
            }
            // Starting fresh at t == 0 on a nonempty prefix is impossible;
            // handled by prev_b above.
            let stay = if t == 0 { NEG_INF } else { gn[t - 1] };
            gn[t] = self.at(t, c) + log_add(phi, stay);
            let prev_self_b = if t == 0 { NEG_INF } else { gb[t - 1] };
            let prev_self_n = if t == 0 { NEG_INF } else { gn[t - 1] };
            gb[t] = self.at(t, BLANK) + log_add(prev_self_b, prev_self_n);
            psi = log_add(psi, phi + self.at(t, c));
        }
        (psi, CtcPrefixState { gamma_blank: gb, gamma_token: gn, last: Some(c) })
    }

    /// Log-probability that the frames collapse to exactly this prefix
    /// (the eos score).
    fn finish(&self, state: &CtcPrefixState) -> f64 {
        if self.t_len == 0 {
            return NEG_INF;
        }
        log_add(state.gamma_blank[self.t_len - 1], state.gamma_token[self.t_len - 1])
    }
}

/// Options for one beam-search run.
#[derive(Debug, Clone)]
pub struct BeamOpts {
    pub beam_width: usize,
    /// CTC fusion weight λ; 0 disables fusion.
    pub ctc_weight: f64,
    pub max_len: usize,
}

impl BeamOpts {
    pub fn from_config(cfg: &DecoderConfig) -> Self {
        BeamOpts { beam_width: cfg.beam_width, ctc_weight: cfg.ctc_fusion_weight, max_len: cfg.max_decode_len }
    }
}

/// Length-synchronous beam search over one utterance.
///
/// `memory` is the encoder output (`1 × T × d_model` values), `ctc_log_probs`
/// (`T × V`, required when λ > 0) feeds the prefix scorer. Hypotheses are
/// ranked by length-normalized combined score; normalization happens only at
/// this final ranking.
pub fn beam_search<T: Scalar>(
    decoder: &TransformerDecoder,
    params: &Params<T>,
    memory: &Tensor<T>,
    memory_len: usize,
    ctc_log_probs: Option<&Tensor<f64>>,
    opts: &BeamOpts,
) -> Result<Vec<Hypothesis>> {
    if memory.rank() != 3 || memory.shape()[0] != 1 {
        return Err(invalid("beam_search", format!("memory must be 1 × T × d, got {:?}", memory.shape())));
    }
    let lambda = opts.ctc_weight;
    let scorer = match (lambda > 0.0, ctc_log_probs) {
        (true, Some(lp)) => Some(CtcPrefixScorer::new(lp)?),
        (true, None) => {
            return Err(invalid("beam_search", "ctc_weight > 0 requires CTC log-probabilities"));
        }
        (false, _) => None,
    };
    let combine = |att: f64, ctc: f64| -> f64 {
        if lambda > 0.0 {
            (1.0 - lambda) * att + lambda * ctc
        } else {
            att
        }
    };

    let root = Hypothesis {
        tokens: Vec::new(),
        score_att: 0.0,
        score_ctc: 0.0,
        combined: 0.0,
        ctc_state: scorer.as_ref().map(|s| s.initial()),
    };
    let mut live = vec![root];
    let mut finished: Vec<Hypothesis> = Vec::new();

    // Candidate tokens: real vocabulary entries plus eos. sos, pad, and the
    // CTC blank are never emitted.
    let candidates: Vec<usize> = std::iter::once(Vocabulary::EOS)
        .chain(Vocabulary::FIRST_TOKEN..decoder.vocab_size)
        .collect();

    for step in 0..opts.max_len {
        if live.is_empty() {
            break;
        }
        // At the cap, only eos is considered, so every returned hypothesis
        // is eos-terminated and its score includes the eos emission.
        let forced_eos = step + 1 == opts.max_len;
        let rows = live.len();
        let width = live[0].tokens.len() + 1; // sos + emitted so far
        let mut ids = Vec::with_capacity(rows * width);
        for h in &live {
            ids.push(Vocabulary::SOS);
            ids.extend_from_slice(&h.tokens);
        }
        // Tile the single-utterance memory across hypothesis rows.
        let t_mem = memory.shape()[1];
        let d = memory.shape()[2];
        let mut mem_data = Vec::with_capacity(rows * t_mem * d);
        for _ in 0..rows {
            mem_data.extend_from_slice(memory.data());
        }
        let tiled = Tensor::new(vec![rows, t_mem, d], mem_data);

        let mut tape = Tape::<T>::new(0, 0, false);
        let mut ctx = ParamCtx::new(params);
        let mem = tape.constant(&tiled)?;
        let fwd = decoder.forward(&mut tape, &mut ctx, mem, &vec![memory_len; rows], &ids, rows, width, false)?;
        let lp = tape.log_softmax(fwd.logits)?;
        let lp = tape.value(lp);
        let v = decoder.vocab_size;

        let step_candidates: &[usize] =
            if forced_eos { std::slice::from_ref(&Vocabulary::EOS) } else { &candidates };
        let mut expanded: Vec<Hypothesis> = Vec::new();
        for (r, h) in live.iter().enumerate() {
            let row = &lp.data()[(r * width + width - 1) * v..(r * width + width) * v];
            for &c in step_candidates {
                let att = h.score_att + row[c].to_f64();
                let (ctc, state) = match (&scorer, &h.ctc_state) {
                    (Some(s), Some(st)) => {
                        if c == Vocabulary::EOS {
                            (s.finish(st), None)
                        } else {
                            let (psi, next) = s.extend(st, c);
                            (psi, Some(next))
                        }
                    }
                    _ => (0.0, None),
                };
                let mut tokens = h.tokens.clone();
                tokens.push(c);
                expanded.push(Hypothesis {
                    tokens,
                    score_att: att,
                    score_ctc: ctc,
                    combined: combine(att, ctc),
                    ctc_state: state,
                });
            }
        }
        // Deterministic ranking: score desc, then tokens ascending.
        expanded.sort_by(|a, b| {
            b.combined
                .partial_cmp(&a.combined)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        expanded.truncate(opts.beam_width);
        live = Vec::new();
        for h in expanded {
            if h.is_finished() {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
    }
    debug_assert!(live.is_empty(), "the forced-eos final step terminates every hypothesis");
    finished.sort_by(|a, b| {
        b.normalized_score()
            .partial_cmp(&a.normalized_score())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    if finished.is_empty() {
        return Err(invalid("beam_search", "no hypotheses produced (max_len 0?)"));
    }
    Ok(finished)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::ctc_loss;
    use crate::numerics::rng::Stream;

    fn tiny_decoder(vocab_size: usize) -> (TransformerDecoder, Params<f64>) {
        let cfg = DecoderConfig { blocks: 1, heads: 2, d_model: 8, d_ff: 16, ..Default::default() };
        let dec = TransformerDecoder::new("dec", cfg, vocab_size).unwrap();
        let mut params = Params::new();
        dec.init(&mut params, 37);
        (dec, params)
    }

    fn random_memory(t_len: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut s = Stream::from_seed(seed);
        Tensor::new(vec![1, t_len, d], (0..t_len * d).map(|_| s.normal()).collect())
    }

    #[test]
    fn causal_mask_matches_examples() {
        let m = causal_mask(3);
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(causal_mask(1).data(), &[1.0]);
        let add = causal_mask_additive::<f64>(2);
        assert_eq!(add.shape(), &[1, 1, 2, 2]);
        assert_eq!(add.data(), &[0.0, MASKED_LOGIT, 0.0, 0.0]);
    }

    #[test]
    fn teacher_forcing_layout() {
        let a = vec![4usize, 5, 6];
        let b = vec![7usize];
        let tf = teacher_forcing(&[&a, &b]);
        assert_eq!(tf.width, 4);
        assert_eq!(&tf.input_ids[0..4], &[Vocabulary::SOS, 4, 5, 6]);
        assert_eq!(&tf.target_ids[0..4], &[4, 5, 6, Vocabulary::EOS]);
        assert_eq!(&tf.include[0..4], &[true, true, true, true]);
        assert_eq!(&tf.input_ids[4..8], &[Vocabulary::SOS, 7, Vocabulary::PAD, Vocabulary::PAD]);
        assert_eq!(&tf.target_ids[4..8], &[7, Vocabulary::EOS, Vocabulary::PAD, Vocabulary::PAD]);
        assert_eq!(&tf.include[4..8], &[true, true, false, false]);
    }

    #[test]
    fn future_tokens_cannot_change_earlier_logits() {
        let (dec, params) = tiny_decoder(8);
        let memory = random_memory(5, 8, 3);
        let run = |ids: &[usize]| -> Vec<f64> {
            let mut tape = Tape::<f64>::new(0, 0, false);
            let mut ctx = ParamCtx::new(&params);
            let mem = tape.constant(&memory).unwrap();
            let fwd = dec.forward(&mut tape, &mut ctx, mem, &[5], ids, 1, ids.len(), false).unwrap();
            tape.value(fwd.logits).data().to_vec()
        };
        let base = run(&[Vocabulary::SOS, 4, 5, 6]);
        let perturbed = run(&[Vocabulary::SOS, 4, 7, 5]);
        let v = 8;
        // Positions 0 and 1 saw identical prefixes; their logits match bit
        // for bit. Positions 2+ legitimately differ.
        assert_eq!(&base[0..2 * v], &perturbed[0..2 * v]);
        assert_ne!(&base[2 * v..], &perturbed[2 * v..]);
    }

    #[test]
    fn cross_attention_rows_sum_to_one() {
        let (dec, params) = tiny_decoder(8);
        let memory = random_memory(6, 8, 9);
        let mut tape = Tape::<f64>::new(0, 0, false);
        let mut ctx = ParamCtx::new(&params);
        let mem = tape.constant(&memory).unwrap();
        let ids = [Vocabulary::SOS, 4, 5];
        let fwd = dec.forward(&mut tape, &mut ctx, mem, &[4], &ids, 1, 3, true).unwrap();
        assert_eq!(fwd.cross_attention.len(), 1);
        let ca = &fwd.cross_attention[0];
        for row in ca.data().chunks(6) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            // Key positions 4..6 are padding (memory_len 4) and masked out.
            assert!(row[4] < 1e-12 && row[5] < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_ln_v_for_any_smoothing() {
        for eps in [0.0, 0.1, 0.3] {
            let mut tape = Tape::<f64>::new(0, 0, false);
            let logits = tape.constant(&Tensor::<f64>::zeros(&[2, 5])).unwrap();
            let loss = tape
                .cross_entropy_label_smoothed(logits, &[1, 4], &[true, true], eps)
                .unwrap();
            assert!((tape.value(loss).item() - (5f64).ln()).abs() < 1e-12, "eps={eps}");
        }
    }

    #[test]
    fn perfect_prediction_drives_unsmoothed_loss_to_zero() {
        let mut data = vec![-50.0; 6];
        data[2] = 50.0;
        let mut tape = Tape::<f64>::new(0, 0, false);
        let logits = tape.constant(&Tensor::<f64>::new(vec![1, 6], data)).unwrap();
        let loss = tape.cross_entropy_label_smoothed(logits, &[2], &[true], 0.0).unwrap();
        assert!(tape.value(loss).item() < 1e-9);
    }

    #[test]
    fn smoothed_loss_is_minimized_at_the_smoothed_target() {
        let (v, eps) = (5usize, 0.1f64);
        let target = 2usize;
        let q: Vec<f64> = (0..v)
            .map(|k| if k == target { 1.0 - eps } else { eps / (v - 1) as f64 })
            .collect();
        let entropy: f64 = -q.iter().map(|p| p * p.ln()).sum::<f64>();
        let eval = |logits: Vec<f64>| -> f64 {
            let mut tape = Tape::<f64>::new(0, 0, false);
            let l = tape.constant(&Tensor::<f64>::new(vec![1, v], logits)).unwrap();
            let loss = tape.cross_entropy_label_smoothed(l, &[target], &[true], eps).unwrap();
            tape.value(loss).item()
        };
        let at_q = eval(q.iter().map(|p| p.ln()).collect());
        assert!((at_q - entropy).abs() < 1e-12, "loss at the smoothed target is its entropy");
        let mut shifted: Vec<f64> = q.iter().map(|p| p.ln()).collect();
        shifted[0] += 0.5;
        assert!(eval(shifted) > at_q, "any other prediction does worse");
    }

    #[test]
    fn joint_loss_is_the_exact_convex_combination() {
        let eval = |alpha: f64| -> f64 {
            let mut tape = Tape::<f64>::new(0, 0, false);
            let c = tape.constant(&Tensor::<f64>::scalar(2.0)).unwrap();
            let a = tape.constant(&Tensor::<f64>::scalar(1.0)).unwrap();
            let j = joint_loss(&mut tape, c, a, alpha).unwrap();
            tape.value(j).item()
        };
        assert!((eval(0.3) - 1.3).abs() < 1e-15);
        assert!((eval(0.0) - 1.0).abs() < 1e-15);
        assert!((eval(1.0) - 2.0).abs() < 1e-15);
        let mut tape = Tape::<f64>::new(0, 0, false);
        let c = tape.constant(&Tensor::<f64>::scalar(2.0)).unwrap();
        let a = tape.constant(&Tensor::<f64>::scalar(1.0)).unwrap();
        assert!(joint_loss(&mut tape, c, a, 1.5).is_err());
    }

    fn random_log_probs(t_len: usize, v: usize, seed: u64) -> Tensor<f64> {
        let mut s = Stream::from_seed(seed);
        let mut data = vec![0.0; t_len * v];
        for row in data.chunks_mut(v) {
            for x in row.iter_mut() {
                *x = s.uniform_in(-3.0, 0.0);
            }
            let norm: f64 = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= norm;
            }
        }
        Tensor::new(vec![t_len, v], data)
    }

    #[test]
    fn ctc_prefix_finish_equals_full_ctc_probability() {
        // The eos transition scores log P(frames collapse to exactly the
        // prefix) — the same quantity the CTC loss computes.
        let v = 7;
        for seed in 0..20u64 {
            let mut s = Stream::from_seed(900 + seed);
            let t_len = 2 + s.below(4);
            let lp = random_log_probs(t_len, v, 31 * seed + 7);
            let labels: Vec<usize> = (0..1 + s.below(3)).map(|_| 4 + s.below(3)).collect();
            if !crate::ctc::is_feasible(t_len, &labels) {
                continue;
            }
            let scorer = CtcPrefixScorer::new(&lp).unwrap();
            let mut state = scorer.initial();
            for &c in &labels {
                let (_, next) = scorer.extend(&state, c);
                state = next;
            }
            let psi_eos = scorer.finish(&state);
            let outcome = ctc_loss(&lp, &labels).unwrap();
            assert!(
                (psi_eos - (-outcome.loss)).abs() < 1e-9,
                "seed {seed}: ψ_eos {psi_eos} vs −ctc_loss {}",
                -outcome.loss
            );
        }
    }

    #[test]
    fn beam_width_one_is_greedy() {
        let (dec, params) = tiny_decoder(8);
        let memory = random_memory(4, 8, 21);
        let opts = BeamOpts { beam_width: 1, ctc_weight: 0.0, max_len: 6 };
        let beam = beam_search(&dec, &params, &memory, 4, None, &opts).unwrap();
        // Greedy reference: repeatedly take the argmax token; the final
        // step forces eos exactly as the beam does.
        let mut tokens: Vec<usize> = Vec::new();
        for step in 0..6 {
            let mut ids = vec![Vocabulary::SOS];
            ids.extend_from_slice(&tokens);
            let mut tape = Tape::<f64>::new(0, 0, false);
            let mut ctx = ParamCtx::new(&params);
            let mem = tape.constant(&memory).unwrap();
            let fwd = dec.forward(&mut tape, &mut ctx, mem, &[4], &ids, 1, ids.len(), false).unwrap();
            let lp = tape.log_softmax(fwd.logits).unwrap();
            let row = &tape.value(lp).data()[(ids.len() - 1) * 8..ids.len() * 8];
            let best = if step == 5 {
                Vocabulary::EOS
            } else {
                std::iter::once(Vocabulary::EOS)
                    .chain(Vocabulary::FIRST_TOKEN..8)
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(b.cmp(&a)))
                    .unwrap()
            };
            tokens.push(best);
            if best == Vocabulary::EOS {
                break;
            }
        }
        assert_eq!(beam[0].tokens, tokens);
    }

    #[test]
    fn wide_beam_matches_exhaustive_enumeration() {
        let v = 7; // 3 real tokens
        let (dec, params) = tiny_decoder(v);
        let memory = random_memory(5, 8, 77);
        let lp = random_log_probs(5, v, 13);
        let lambda = 0.3;
        // max_len 4 emissions = up to 3 real tokens plus the forced eos;
        // width 512 exceeds every per-step frontier, so nothing is pruned
        // and the beam IS an exhaustive search.
        let max_len = 3;
        let opts = BeamOpts { beam_width: 512, ctc_weight: lambda, max_len: max_len + 1 };
        let beam = beam_search(&dec, &params, &memory, 5, Some(&lp), &opts).unwrap();

        // Exhaustive: score every token sequence of length ≤ 3 (plus eos)
        // with the identical attention and CTC-prefix quantities.
        let scorer = CtcPrefixScorer::new(&lp).unwrap();
        let att_score = |seq: &[usize]| -> f64 {
            // Teacher-force sos + seq, reading log P of each token then eos.
            let mut ids = vec![Vocabulary::SOS];
            ids.extend_from_slice(seq);
            let mut tape = Tape::<f64>::new(0, 0, false);
            let mut ctx = ParamCtx::new(&params);
            let mem = tape.constant(&memory).unwrap();
            let fwd = dec.forward(&mut tape, &mut ctx, mem, &[5], &ids, 1, ids.len(), false).unwrap();
            let l = tape.log_softmax(fwd.logits).unwrap();
            let data = tape.value(l).data();
            let mut total = 0.0;
            for (pos, &tok) in seq.iter().enumerate() {
                total += data[pos * v + tok];
            }
            total + data[(ids.len() - 1) * v + Vocabulary::EOS]
        };
        let mut best: Option<(f64, Vec<usize>)> = None;
        let tokens: Vec<usize> = (Vocabulary::FIRST_TOKEN..v).collect();
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(seq) = stack.pop() {
            if seq.len() < max_len {
                for &t in &tokens {
                    let mut s = seq.clone();
                    s.push(t);
                    stack.push(s);
                }
            }
            // Score seq followed by eos (the empty sequence included).
            let mut state = scorer.initial();
            for &c in &seq {
                let (_, next) = scorer.extend(&state, c);
                state = next;
            }
            let ctc = scorer.finish(&state);
            let att = att_score(&seq);
            let combined = (1.0 - lambda) * att + lambda * ctc;
            let norm = combined / (seq.len() + 1) as f64; // + eos
            let candidate = (norm, seq.clone());
            best = match best {
                None => Some(candidate),
                Some(b) if candidate.0 > b.0 + 1e-15 => Some(candidate),
                Some(b) => Some(b),
            };
        }
        let (best_score, best_seq) = best.unwrap();
        assert_eq!(beam[0].emitted(), &best_seq[..], "beam top-1 equals exhaustive argmax");
        assert!((beam[0].normalized_score() - best_score).abs() < 1e-9);
    }

    #[test]
    fn lambda_zero_ignores_ctc_scores() {
        let (dec, params) = tiny_decoder(8);
        let memory = random_memory(4, 8, 55);
        let opts = BeamOpts { beam_width: 4, ctc_weight: 0.0, max_len: 5 };
        let a = beam_search(&dec, &params, &memory, 4, Some(&random_log_probs(4, 8, 1)), &opts).unwrap();
        let b = beam_search(&dec, &params, &memory, 4, Some(&random_log_probs(4, 8, 2)), &opts).unwrap();
        let seq = |hs: &[Hypothesis]| -> Vec<Vec<usize>> { hs.iter().map(|h| h.tokens.clone()).collect() };
        assert_eq!(seq(&a), seq(&b));
    }

    #[test]
    fn top_score_is_monotone_in_beam_width() {
        let (dec, params) = tiny_decoder(7);
        let memory = random_memory(5, 8, 99);
        let lp = random_log_probs(5, 7, 42);
        let mut prev = f64::NEG_INFINITY;
        for width in [1usize, 2, 4, 8] {
            let opts = BeamOpts { beam_width: width, ctc_weight: 0.3, max_len: 4 };
            let beam = beam_search(&dec, &params, &memory, 5, Some(&lp), &opts).unwrap();
            let top = beam[0].normalized_score();
            assert!(top >= prev - 1e-12, "width {width}: {top} < {prev}");
            prev = top;
        }
    }

    #[test]
    fn missing_ctc_matrix_with_fusion_is_an_error() {
        let (dec, params) = tiny_decoder(7);
        let memory = random_memory(3, 8, 1);
        let opts = BeamOpts { beam_width: 2, ctc_weight: 0.5, max_len: 3 };
        assert!(beam_search(&dec, &params, &memory, 3, None, &opts).is_err());
    }
}
