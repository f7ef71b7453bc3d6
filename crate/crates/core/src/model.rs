//! The joint model: the pretrainable encoder, a CTC projection head, and
//! the autoregressive decoder, trained with the α-weighted combination of
//! both losses. Parameters are namespaced `mpe.` / `ctc.` / `dec.` so the
//! pretrained (freezable) set is exactly the `mpe.` prefix.

use std::collections::BTreeSet;

use crate::ctc::{ctc_batch, ctc_greedy_decode};
use crate::decoder::{
    beam_search, joint_loss, teacher_forcing, BeamOpts, DecoderConfig, Hypothesis,
    TransformerDecoder,
};
use crate::encoder::{EncoderConfig, MpeEncoder};
use crate::features::{Batch, Vocabulary};
use crate::nn::{Linear, ParamCtx, Params};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::{NumericsError, Result};

fn invalid(op: &'static str, msg: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument { op, msg: msg.into() }
}

/// Parameter namespace of the pretrained component.
pub const MPE_PREFIX: &str = "mpe.";

/// True for parameters the frozen fine-tuning mode excludes from updates.
pub fn is_mpe_param(name: &str) -> bool {
    name.starts_with(MPE_PREFIX)
}

/// Complete model hyperparameters.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.encoder.d_model != self.decoder.d_model {
            return Err(invalid(
                "model_config",
                format!("encoder d_model {} != decoder d_model {}", self.encoder.d_model, self.decoder.d_model),
            ));
        }
        Ok(())
    }
}

/// Loss values of one supervised batch.
pub struct JointLossParts {
    /// `α·ctc + (1−α)·attention`, on the tape.
    pub loss: Var,
    pub ctc_value: f64,
    pub att_value: f64,
    /// Utterances whose downsampled length cannot fit their label sequence;
    /// they are excluded from the CTC mean.
    pub infeasible: usize,
}

/// Decoding artifacts for one utterance.
pub struct DecodeOutcome {
    pub hypotheses: Vec<Hypothesis>,
    /// Greedy CTC output, for diagnostics.
    pub ctc_greedy: Vec<usize>,
}

/// Encoder + CTC head + decoder over a shared vocabulary.
#[derive(Debug, Clone)]
pub struct JctModel {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub encoder: MpeEncoder,
    pub decoder: TransformerDecoder,
    ctc_head: Linear,
}

impl JctModel {
    pub fn new(cfg: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let encoder = MpeEncoder::new("mpe", cfg.encoder.clone())?;
        let decoder = TransformerDecoder::new("dec", cfg.decoder.clone(), vocab.size())?;
        let ctc_head = Linear::new("ctc.out", cfg.encoder.d_model, vocab.size());
        Ok(JctModel { cfg, vocab, encoder, decoder, ctc_head })
    }

    /// Fresh parameters for every component, seeded per name.
    pub fn init_params<T: Scalar>(&self, root_seed: u64) -> Params<T> {
        let mut params = Params::new();
        self.encoder.init(&mut params, root_seed);
        self.decoder.init(&mut params, root_seed);
        self.ctc_head.init(&mut params, root_seed);
        params
    }

    /// Names of the pretrained (freezable) parameter set.
    pub fn mpe_names(&self) -> BTreeSet<String> {
        self.encoder.names().into_iter().collect()
    }

    pub fn all_names(&self) -> BTreeSet<String> {
        let mut names = self.mpe_names();
        names.extend(self.decoder.names());
        names.extend(self.ctc_head.names());
        names
    }

    /// CTC branch for an encoded batch: per-frame log-probabilities
    /// (`B × T × V`) on the tape.
    fn ctc_log_probs<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ParamCtx<'_, T>,
        e: Var,
    ) -> Result<Var> {
        let logits = self.ctc_head.forward(tape, ctx, e)?;
        tape.log_softmax(logits)
    }

    /// Mean CTC loss over the feasible utterances of a batch, injected into
    /// the tape (the forward-backward recursion supplies its own gradient).
    /// Returns the scalar Var, the value, and the infeasible count.
    fn ctc_batch_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        lp: Var,
        batch: &Batch<T>,
        ds_lengths: &[usize],
    ) -> Result<(Option<Var>, f64, usize)> {
        let b = batch.batch_size();
        // Slice each utterance's valid rows and run the lattices in one
        // parallel batch over the raw values.
        let mut slices: Vec<Var> = Vec::with_capacity(b);
        let mut matrices: Vec<Tensor<T>> = Vec::with_capacity(b);
        for (i, &t_b) in ds_lengths.iter().enumerate() {
            let row = tape.slice(lp, 0, i, 1)?;
            let row = tape.slice(row, 1, 0, t_b)?;
            let row = tape.reshape(row, &[t_b, self.vocab.size()])?;
            slices.push(row);
            matrices.push(tape.value(row).clone());
        }
        let items: Vec<(&Tensor<T>, &[usize])> =
            (0..b).map(|i| (&matrices[i], batch.target(i))).collect();
        let outcomes = ctc_batch(&items)?;

        let feasible: Vec<usize> = (0..b).filter(|&i| !outcomes[i].infeasible).collect();
        let infeasible = b - feasible.len();
        if feasible.is_empty() {
            return Ok((None, f64::INFINITY, infeasible));
        }
        let scale = 1.0 / feasible.len() as f64;
        let mut total: Option<Var> = None;
        let mut value = 0.0;
        for &i in &feasible {
            let o = &outcomes[i];
            value += o.loss * scale;
            let term = tape.custom_scalar(slices[i], o.loss, o.grad.clone())?;
            let term = tape.scale(term, scale)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        Ok((Some(total.expect("at least one feasible utterance")), value, infeasible))
    }

    /// The supervised objective for one batch:
    /// `α·L_CTC + (1−α)·L_Attention`.
    pub fn joint_loss_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ParamCtx<'_, T>,
        batch: &Batch<T>,
    ) -> Result<JointLossParts> {
        let alpha = self.cfg.decoder.alpha;
        let encoded = self.encoder.encode_features(tape, ctx, batch, false)?;
        let lp = self.ctc_log_probs(tape, ctx, encoded.e)?;
        let (ctc, ctc_value, infeasible) = self.ctc_batch_loss(tape, lp, batch, &encoded.ds_lengths)?;

        let targets: Vec<&[usize]> = (0..batch.batch_size()).map(|i| batch.target(i)).collect();
        let tf = teacher_forcing(&targets);
        let att = self.decoder.attention_loss(tape, ctx, encoded.e, &encoded.ds_lengths, &tf)?;
        let att_value = tape.value(att).item().to_f64();

        let loss = match ctc {
            Some(ctc) => joint_loss(tape, ctc, att, alpha)?,
            // Every utterance infeasible: only the attention branch carries
            // gradient this step.
            None => tape.scale(att, 1.0 - alpha)?,
        };
        Ok(JointLossParts { loss, ctc_value, att_value, infeasible })
    }

    /// Decode one utterance (a `1 × t × D_in` feature batch) with the
    /// configured beam.
    pub fn decode_utterance<T: Scalar>(
        &self,
        params: &Params<T>,
        batch: &Batch<T>,
        opts: &BeamOpts,
    ) -> Result<DecodeOutcome> {
        if batch.batch_size() != 1 {
            return Err(invalid("decode", "decode_utterance expects a single-utterance batch"));
        }
        let mut tape = Tape::<T>::new(0, 0, false);
        let mut ctx = ParamCtx::new(params);
        let encoded = self.encoder.encode_features(&mut tape, &mut ctx, batch, false)?;
        let memory = tape.value(encoded.e).clone();
        let t_valid = encoded.ds_lengths[0];
        let lp = self.ctc_log_probs(&mut tape, &mut ctx, encoded.e)?;
        let lp_t = tape.value(lp);
        let v = self.vocab.size();
        // Valid rows only, in f64 for the lattice scorers.
        let lp_valid = Tensor::<f64>::new(
            vec![t_valid, v],
            lp_t.data()[..t_valid * v].iter().map(|x| x.to_f64()).collect(),
        );
        let ctc_greedy = ctc_greedy_decode(&lp_valid)?;
        let hypotheses = beam_search(
            &self.decoder,
            params,
            &memory,
            t_valid,
            Some(&lp_valid),
            opts,
        )?;
        Ok(DecodeOutcome { hypotheses, ctc_greedy })
    }

    /// Encoder self-attention maps (`layers × B × heads × T × T`) plus the
    /// valid lengths, for the attention diagnostic.
    pub fn encoder_attention<T: Scalar>(
        &self,
        params: &Params<T>,
        batch: &Batch<T>,
    ) -> Result<(Vec<Tensor<T>>, Vec<usize>)> {
        let mut tape = Tape::<T>::new(0, 0, false);
        let mut ctx = ParamCtx::new(params);
        let encoded = self.encoder.encode_features(&mut tape, &mut ctx, batch, true)?;
        Ok((encoded.attention, encoded.ds_lengths))
    }
}
