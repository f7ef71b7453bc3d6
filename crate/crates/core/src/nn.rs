//! Transformer building blocks shared by the encoder and the decoder:
//! parameter storage with order-independent seeded init, linear layers,
//! multi-head attention, position-wise feed-forward layers, and the post-LN
//! residual blocks assembled from them.

use std::collections::BTreeMap;

use crate::numerics::rng::Stream;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::{NumericsError, Result};

/// Named parameter tensors. A `BTreeMap` so iteration order is stable
/// everywhere (updates, checkpoints, norms).
pub type Params<T> = BTreeMap<String, Tensor<T>>;

/// Additive value standing in for −∞ on masked attention logits. Finite so
/// tensor finiteness checks stay meaningful; large enough that softmax
/// assigns masked positions weight 0 to double precision.
pub const MASKED_LOGIT: f64 = -1.0e9;

fn missing(name: &str) -> NumericsError {
    NumericsError::InvalidArgument { op: "param_lookup", msg: format!("no parameter named {name}") }
}

/// Registers parameters on a tape at most once each per forward pass.
pub struct ParamCtx<'p, T: Scalar> {
    params: &'p Params<T>,
    vars: BTreeMap<String, Var>,
}

impl<'p, T: Scalar> ParamCtx<'p, T> {
    pub fn new(params: &'p Params<T>) -> Self {
        ParamCtx { params, vars: BTreeMap::new() }
    }

    /// Tape variable for a named parameter, registering it on first use.
    pub fn var(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let tensor = self.params.get(name).ok_or_else(|| missing(name))?;
        let v = tape.param(name, tensor)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &'p Params<T> {
        self.params
    }
}

/// Seed stream for one named parameter: a function of the name alone (plus
/// the root seed), so registration order never changes initialization.
const INIT_STREAM_SALT: u64 = 0x7061_7261_6d5f_6930; // distinguishes init from other uses of the name tag

fn init_stream(root_seed: u64, name: &str) -> Stream {
    Stream::derived(root_seed, name, &[INIT_STREAM_SALT])
}

fn xavier_uniform<T: Scalar>(root_seed: u64, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let mut s = init_stream(root_seed, name);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(s.uniform_in(-bound, bound))).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn init_linear<T: Scalar>(params: &mut Params<T>, root_seed: u64, name: &str, d_in: usize, d_out: usize) {
    params.insert(format!("{name}.w"), xavier_uniform(root_seed, &format!("{name}.w"), &[d_in, d_out], d_in, d_out));
    params.insert(format!("{name}.b"), Tensor::zeros(&[d_out]));
}

pub fn init_layer_norm<T: Scalar>(params: &mut Params<T>, name: &str, dim: usize) {
    params.insert(format!("{name}.g"), Tensor::full(&[dim], T::one()));
    params.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

/// Embedding table `vocab × d`, N(0, d^−1/2); lookups rescale by √d.
pub fn init_embedding<T: Scalar>(params: &mut Params<T>, root_seed: u64, name: &str, vocab: usize, d: usize) {
    let mut s = init_stream(root_seed, name);
    let std = 1.0 / (d as f64).sqrt();
    let data: Vec<T> = (0..vocab * d).map(|_| T::from_f64(s.normal() * std)).collect();
    params.insert(name.to_string(), Tensor::new(vec![vocab, d], data));
}

pub fn init_conv2d<T: Scalar>(params: &mut Params<T>, root_seed: u64, name: &str, c_out: usize, c_in: usize, kernel: usize) {
    let fan_in = c_in * kernel * kernel;
    let fan_out = c_out * kernel * kernel;
    params.insert(
        format!("{name}.w"),
        xavier_uniform(root_seed, &format!("{name}.w"), &[c_out, c_in, kernel, kernel], fan_in, fan_out),
    );
    params.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
}

/// Fully-connected layer `d_in → d_out` (weights `name.w`, bias `name.b`).
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear { name: name.into(), d_in, d_out }
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, root_seed: u64) {
        init_linear(params, root_seed, &self.name, self.d_in, self.d_out);
    }

    pub fn names(&self) -> Vec<String> {
        vec![format!("{}.w", self.name), format!("{}.b", self.name)]
    }

    /// `x` is `… × d_in`; returns `… × d_out`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &mut ParamCtx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(tape, &format!("{}.w", self.name))?;
        let b = ctx.var(tape, &format!("{}.b", self.name))?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Layer normalization over the last axis (gain `name.g`, bias `name.b`).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm { name: name.into(), dim, eps: 1e-6 }
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, _root_seed: u64) {
        init_layer_norm(params, &self.name, self.dim);
    }

    pub fn names(&self) -> Vec<String> {
        vec![format!("{}.g", self.name), format!("{}.b", self.name)]
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &mut ParamCtx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.var(tape, &format!("{}.g", self.name))?;
        let b = ctx.var(tape, &format!("{}.b", self.name))?;
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Multi-head scaled-dot-product attention with projections `q`, `k`, `v`,
/// `o` under `name.`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub d_model: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

/// Attention output: projected context plus the post-softmax weights
/// (`batch × heads × T_q × T_k`) for diagnostics.
pub struct AttentionOut {
    pub out: Var,
    pub probs: Var,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, d_model: usize, heads: usize) -> Result<Self> {
        let name = name.into();
        if heads == 0 || d_model % heads != 0 {
            return Err(NumericsError::InvalidArgument {
                op: "multi_head_attention",
                msg: format!("heads={heads} must divide d_model={d_model}"),
            });
        }
        Ok(MultiHeadAttention {
            q: Linear::new(format!("{name}.q"), d_model, d_model),
            k: Linear::new(format!("{name}.k"), d_model, d_model),
            v: Linear::new(format!("{name}.v"), d_model, d_model),
            o: Linear::new(format!("{name}.o"), d_model, d_model),
            name,
            d_model,
            heads,
        })
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, root_seed: u64) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(params, root_seed);
        }
    }

    pub fn names(&self) -> Vec<String> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.names()).collect()
    }

    /// `query`: `B × T_q × d`, `key`/`value` share `B × T_k × d`.
    /// `mask` is an additive logit tensor broadcastable to
    /// `B × heads × T_q × T_k` (0 = attend, [`MASKED_LOGIT`] = blocked).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ParamCtx<'_, T>,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&Tensor<T>>,
        dropout: f64,
    ) -> Result<AttentionOut> {
        let (b, t_q) = {
            let s = tape.value(query).shape();
            (s[0], s[1])
        };
        let t_k = tape.value(key).shape()[1];
        let dh = self.d_model / self.heads;

        let split = |tape: &mut Tape<T>, x: Var, t_len: usize| -> Result<Var> {
            // B × T × d → B × H × T × dh
            let x = tape.reshape(x, &[b, t_len, self.heads, dh])?;
            tape.transpose(x, 1, 2)
        };

        let q = self.q.forward(tape, ctx, query)?;
        let k = self.k.forward(tape, ctx, key)?;
        let v = self.v.forward(tape, ctx, value)?;
        let q = split(tape, q, t_q)?;
        let k = split(tape, k, t_k)?;
        let v = split(tape, v, t_k)?;

        let k_t = tape.transpose(k, 2, 3)?; // B × H × dh × T_k
        let scores = tape.matmul(q, k_t)?; // B × H × T_q × T_k
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = match mask {
            Some(m) => {
                let m = tape.constant(m)?;
                tape.add(scores, m)?
            }
            None => scores,
        };
        let probs = tape.softmax(scores)?;
        let attended = tape.dropout(probs, dropout)?;
        let context = tape.matmul(attended, v)?; // B × H × T_q × dh
        let context = tape.transpose(context, 1, 2)?; // B × T_q × H × dh
        let context = tape.reshape(context, &[b, t_q, self.d_model])?;
        let out = self.o.forward(tape, ctx, context)?;
        Ok(AttentionOut { out, probs })
    }
}

/// Position-wise feed-forward: `Linear → ReLU → Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub name: String,
    w1: Linear,
    w2: Linear,
}

impl FeedForward {
    pub fn new(name: impl Into<String>, d_model: usize, d_ff: usize) -> Self {
        let name = name.into();
        FeedForward {
            w1: Linear::new(format!("{name}.w1"), d_model, d_ff),
            w2: Linear::new(format!("{name}.w2"), d_ff, d_model),
            name,
        }
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, root_seed: u64) {
        self.w1.init(params, root_seed);
        self.w2.init(params, root_seed);
    }

    pub fn names(&self) -> Vec<String> {
        self.w1.names().into_iter().chain(self.w2.names()).collect()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &mut ParamCtx<'_, T>, x: Var) -> Result<Var> {
        let h = self.w1.forward(tape, ctx, x)?;
        let h = tape.relu(h)?;
        self.w2.forward(tape, ctx, h)
    }
}

/// Post-LN encoder block: `LN(x + Drop(MHA(x))) → LN(· + Drop(FF(·)))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(name: &str, d_model: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(EncoderBlock {
            attn: MultiHeadAttention::new(format!("{name}.attn"), d_model, heads)?,
            ff: FeedForward::new(format!("{name}.ff"), d_model, d_ff),
            ln1: LayerNorm::new(format!("{name}.ln1"), d_model),
            ln2: LayerNorm::new(format!("{name}.ln2"), d_model),
        })
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, root_seed: u64) {
        self.attn.init(params, root_seed);
        self.ff.init(params, root_seed);
        self.ln1.init(params, root_seed);
        self.ln2.init(params, root_seed);
    }

    pub fn names(&self) -> Vec<String> {
        self.attn
            .names()
            .into_iter()
            .chain(self.ff.names())
            .chain(self.ln1.names())
            .chain(self.ln2.names())
            .collect()
    }

    /// Returns the block output and the self-attention weights.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ParamCtx<'_, T>,
        x: Var,
        mask: Option<&Tensor<T>>,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let att = self.attn.forward(tape, ctx, x, x, x, mask, dropout)?;
        let dropped = tape.dropout(att.out, dropout)?;
        let x = tape.add(x, dropped)?;
        let x = self.ln1.forward(tape, ctx, x)?;
        let f = self.ff.forward(tape, ctx, x)?;
        let f = tape.dropout(f, dropout)?;
        let x2 = tape.add(x, f)?;
        let out = self.ln2.forward(tape, ctx, x2)?;
        Ok((out, att.probs))
    }
}

/// Post-LN decoder block: masked self-attention, cross-attention over the
/// encoder output, then the feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
}

impl DecoderBlock {
    pub fn new(name: &str, d_model: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(DecoderBlock {
            self_attn: MultiHeadAttention::new(format!("{name}.self"), d_model, heads)?,
            cross_attn: MultiHeadAttention::new(format!("{name}.cross"), d_model, heads)?,
            ff: FeedForward::new(format!("{name}.ff"), d_model, d_ff),
            ln1: LayerNorm::new(format!("{name}.ln1"), d_model),
            ln2: LayerNorm::new(format!("{name}.ln2"), d_model),
            ln3: LayerNorm::new(format!("{name}.ln3"), d_model),
        })
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, root_seed: u64) {
        self.self_attn.init(params, root_seed);
        self.cross_attn.init(params, root_seed);
        self.ff.init(params, root_seed);
        self.ln1.init(params, root_seed);
        self.ln2.init(params, root_seed);
        self.ln3.init(params, root_seed);
    }

    pub fn names(&self) -> Vec<String> {
        self.self_attn
            .names()
            .into_iter()
            .chain(self.cross_attn.names())
            .chain(self.ff.names())
            .chain(self.ln1.names())
            .chain(self.ln2.names())
            .chain(self.ln3.names())
            .collect()
    }

    /// Returns (output, self-attention probs, cross-attention probs).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &mut ParamCtx<'_, T>,
        x: Var,
        memory: Var,
        self_mask: Option<&Tensor<T>>,
        cross_mask: Option<&Tensor<T>>,
        dropout: f64,
    ) -> Result<(Var, Var, Var)> {
        let sa = self.self_attn.forward(tape, ctx, x, x, x, self_mask, dropout)?;
        let d = tape.dropout(sa.out, dropout)?;
        let x = tape.add(x, d)?;
        let x = self.ln1.forward(tape, ctx, x)?;

        let ca = self.cross_attn.forward(tape, ctx, x, memory, memory, cross_mask, dropout)?;
        let d = tape.dropout(ca.out, dropout)?;
        let x = tape.add(x, d)?;
        let x = self.ln2.forward(tape, ctx, x)?;

        let f = self.ff.forward(tape, ctx, x)?;
        let f = tape.dropout(f, dropout)?;
        let x2 = tape.add(x, f)?;
        let out = self.ln3.forward(tape, ctx, x2)?;
        Ok((out, sa.probs, ca.probs))
    }
}

/// Additive key-padding mask `B × 1 × 1 × t_max`: 0 on real positions,
/// [`MASKED_LOGIT`] on padding, broadcastable over heads and query rows.
pub fn key_padding_mask<T: Scalar>(lengths: &[usize], t_max: usize) -> Tensor<T> {
    let b = lengths.len();
    let mut data = vec![T::zero(); b * t_max];
    for (i, &len) in lengths.iter().enumerate() {
        for t in len..t_max {
            data[i * t_max + t] = T::from_f64(MASKED_LOGIT);
        }
    }
    Tensor::new(vec![b, 1, 1, t_max], data)
}

/// Multiplicative time-validity mask `B × t_max × 1`: 1 on real frames,
/// 0 on padding. Multiplying activations by it keeps padded rows at zero.
pub fn time_validity_mask<T: Scalar>(lengths: &[usize], t_max: usize) -> Tensor<T> {
    let b = lengths.len();
    let mut data = vec![T::zero(); b * t_max];
    for (i, &len) in lengths.iter().enumerate() {
        for t in 0..len.min(t_max) {
            data[i * t_max + t] = T::one();
        }
    }
    Tensor::new(vec![b, t_max, 1], data)
}
