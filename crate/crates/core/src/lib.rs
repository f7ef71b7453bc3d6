//! Two-stage acoustic model training at desk scale: masked-reconstruction
//! pretraining of a convolutionally downsampled bidirectional transformer
//! encoder, followed by joint CTC/attention fine-tuning, with beam-search
//! decoding and word-error-rate evaluation.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense tensors, reverse-mode autodiff, Adam, gradient checks
//! - [`nn`]: parameterized layers (linear, attention, transformer blocks)
//! - [`features`]: feature ingest/synthesis, deltas, normalization, batching
//! - [`encoder`]: downsampler, frame masking, encoder stack, reconstruction loss
//! - [`ctc`]: CTC loss (forward-backward), greedy and prefix beam decoding
//! - [`decoder`]: autoregressive decoder, label smoothing, joint loss, beam search
//! - [`model`]: the assembled encoder/decoder/CTC-head model
//! - [`training`]: pretrain/fine-tune loops, Noam schedule, checkpoints, WER
//!
//! All kernels with data-parallel inner loops go through [`numerics::par`],
//! which uses rayon when the `parallel` feature is enabled (the default) and
//! plain loops otherwise. Both paths produce bit-identical results: parallel
//! work is always split over disjoint output regions and reductions happen
//! in a fixed order.

pub mod ctc;
pub mod decoder;
pub mod encoder;
pub mod features;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod training;

pub use numerics::tensor::{DType, Scalar, Tensor};
