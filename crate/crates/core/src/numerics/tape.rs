//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records every operation applied to tracked values. Each op
//! validates input shapes up front and checks its output for NaN/Inf, so a
//! numerical blow-up surfaces as an error naming the offending op instead of
//! propagating silently. [`Tape::backward`] consumes the tape and returns a
//! [`GradStore`] keyed by parameter name.
//!
//! Dropout masks are derived from `(root seed, step, node id)`, never from a
//! shared mutable RNG, so a training step replays bit-identically regardless
//! of how unrelated code consumes randomness.

use std::collections::BTreeMap;

use super::kernels::{self, Conv2dGeom};
use super::rng::Stream;
use super::tensor::{strides, Scalar, Tensor};
use super::{NumericsError, Result};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients keyed by parameter name.
#[derive(Debug, Clone)]
pub struct GradStore<T: Scalar> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.grads.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// ℓ₂ norm over every coordinate of every gradient.
    pub fn global_norm(&self) -> T {
        let mut sq = T::zero();
        for g in self.grads.values() {
            for &v in g.data() {
                sq = sq + v * v;
            }
        }
        sq.sqrt()
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Matmul { a: usize, b: usize },
    Relu { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    LogSumExp { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, means: Vec<T>, inv_stds: Vec<T> },
    Conv2d { input: usize, weight: usize, bias: usize, geom: Conv2dGeom },
    Embedding { table: usize, ids: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Transpose { a: usize, ax0: usize, ax1: usize },
    Reshape { a: usize },
    Dropout { a: usize, mask: Vec<T> },
    MaskRows { a: usize, sources: Vec<Option<usize>> },
    Scale { a: usize, c: T },
    Abs { a: usize },
    Sum { a: usize },
    CrossEntropyLs { logits: usize, targets: Vec<usize>, include: Vec<bool>, epsilon: f64 },
    /// Externally computed scalar function of one input, with its gradient
    /// supplied up front (used for the CTC loss, whose forward-backward
    /// recursion lives outside the tape).
    Custom { a: usize, grad: Tensor<T> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Matmul { .. } => "matmul",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LogSumExp { .. } => "log_sum_exp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Dropout { .. } => "dropout",
            Op::MaskRows { .. } => "mask_rows",
            Op::Scale { .. } => "scale",
            Op::Abs { .. } => "abs",
            Op::Sum { .. } => "sum",
            Op::CrossEntropyLs { .. } => "cross_entropy_ls",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param_name: Option<String>,
}

/// Records a computation for one replay of [`Tape::backward`].
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_ids: BTreeMap<String, usize>,
    root_seed: u64,
    step: u64,
    training: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument { op, msg: msg.into() }
}

/// Effective strides of `shape` when broadcast against `target`: axes of
/// length 1 (and missing leading axes) get stride 0. Errors if `shape` is not
/// broadcastable to `target`.
fn broadcast_strides(
    op: &'static str,
    shape: &[usize],
    target: &[usize],
) -> Result<Vec<usize>> {
    if shape.len() > target.len() {
        return Err(shape_err(op, target, shape));
    }
    let own = strides(shape);
    let offset = target.len() - shape.len();
    let mut out = vec![0usize; target.len()];
    for (i, &t) in target.iter().enumerate() {
        if i < offset {
            continue;
        }
        let s = shape[i - offset];
        if s == t {
            out[i] = own[i - offset];
        } else if s == 1 {
            out[i] = 0;
        } else {
            return Err(shape_err(op, target, shape));
        }
    }
    Ok(out)
}

/// Walks every flat index of `target` together with the corresponding flat
/// index into a tensor broadcast to it.
fn for_each_broadcast(target: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = target.iter().product();
    let t_strides = strides(target);
    for flat in 0..numel {
        let mut rem = flat;
        let mut b_flat = 0;
        for (i, &ts) in t_strides.iter().enumerate() {
            let coord = rem / ts;
            rem %= ts;
            b_flat += coord * b_strides[i];
        }
        f(flat, b_flat);
    }
}

impl<T: Scalar> Tape<T> {
    /// `root_seed` and `step` key the dropout streams; `training` enables
    /// dropout (an inference tape applies none).
    pub fn new(root_seed: u64, step: u64, training: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            param_ids: BTreeMap::new(),
            root_seed,
            step,
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Current value of a tracked variable.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, requires_grad, param_name: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register a trainable parameter. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Result<Var> {
        if self.param_ids.contains_key(name) {
            return Err(invalid("param", format!("duplicate parameter name {name:?}")));
        }
        let v = self.push(value.clone(), Op::Leaf, true)?;
        self.nodes[v.0].param_name = Some(name.to_string());
        self.param_ids.insert(name.to_string(), v.0);
        Ok(v)
    }

    /// Track a constant input; no gradient flows into it.
    pub fn constant(&mut self, value: &Tensor<T>) -> Result<Var> {
        self.push(value.clone(), Op::Leaf, false)
    }

    fn req(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Elementwise sum. `b` may broadcast against `a` (length-1 axes or
    /// missing leading axes), which covers bias and positional-encoding adds.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let bs = broadcast_strides("add", sb, sa)?;
        let mut out = self.nodes[a.0].value.clone();
        let b_data = self.nodes[b.0].value.data();
        {
            let data = out.data_mut();
            for_each_broadcast(self.nodes[a.0].value.shape(), &bs, |i, j| {
                data[i] = data[i] + b_data[j];
            });
        }
        let rg = self.req(&[a.0, b.0]);
        self.push(out, Op::Add { a: a.0, b: b.0 }, rg)
    }

    /// Elementwise product, with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let bs = broadcast_strides("mul", sb, sa)?;
        let mut out = self.nodes[a.0].value.clone();
        let b_data = self.nodes[b.0].value.data();
        {
            let data = out.data_mut();
            for_each_broadcast(self.nodes[a.0].value.shape(), &bs, |i, j| {
                data[i] = data[i] * b_data[j];
            });
        }
        let rg = self.req(&[a.0, b.0]);
        self.push(out, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    /// Matrix product over the last two axes. Either `b` is rank 2 (applied
    /// to every leading slice of `a`, the linear-layer case) or `a` and `b`
    /// share identical leading dimensions (the batched-attention case).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batched = sb.len() > 2;
        if batched && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let lead: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = Tensor::zeros(&out_shape);
        {
            let a_data = self.nodes[a.0].value.data();
            let b_data = self.nodes[b.0].value.data();
            let o_data = out.data_mut();
            if batched {
                for l in 0..lead {
                    kernels::matmul_nn(
                        &a_data[l * m * k..(l + 1) * m * k],
                        &b_data[l * k * n..(l + 1) * k * n],
                        &mut o_data[l * m * n..(l + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            } else {
                kernels::matmul_nn(a_data, b_data, o_data, lead * m, k, n);
            }
        }
        let rg = self.req(&[a.0, b.0]);
        self.push(out, Op::Matmul { a: a.0, b: b.0 }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.req(&[a.0]);
        self.push(out, Op::Relu { a: a.0 }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let width = self.last_width("softmax", a)?;
        let mut out = self.nodes[a.0].value.clone();
        kernels::softmax_rows(out.data_mut(), width, None);
        let rg = self.req(&[a.0]);
        self.push(out, Op::Softmax { a: a.0 }, rg)
    }

    /// log softmax over the last axis (numerically stable x − logΣexp(x)).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let width = self.last_width("log_softmax", a)?;
        let mut out = self.nodes[a.0].value.clone();
        {
            let data = out.data_mut();
            for row in data.chunks_mut(width) {
                let mut max = row[0];
                for &v in row.iter() {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                for &v in row.iter() {
                    sum = sum + (v - max).exp();
                }
                let lse = max + sum.ln();
                for v in row.iter_mut() {
                    *v = *v - lse;
                }
            }
        }
        let rg = self.req(&[a.0]);
        self.push(out, Op::LogSoftmax { a: a.0 }, rg)
    }

    /// logΣexp over the last axis, dropping it from the shape.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let width = self.last_width("log_sum_exp", a)?;
        let in_shape = self.nodes[a.0].value.shape();
        let out_shape = in_shape[..in_shape.len() - 1].to_vec();
        let rows = self.nodes[a.0].value.numel() / width;
        let mut out = Tensor::zeros(&out_shape);
        {
            let data = self.nodes[a.0].value.data();
            let o = out.data_mut();
            for (r, slot) in o.iter_mut().enumerate().take(rows) {
                let row = &data[r * width..(r + 1) * width];
                let mut max = row[0];
                for &v in row.iter() {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                for &v in row.iter() {
                    sum = sum + (v - max).exp();
                }
                *slot = max + sum.ln();
            }
        }
        let rg = self.req(&[a.0]);
        self.push(out, Op::LogSumExp { a: a.0 }, rg)
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let width = self.last_width("layer_norm", x)?;
        for &p in &[gamma.0, beta.0] {
            if self.nodes[p].value.shape() != [width] {
                return Err(shape_err(
                    "layer_norm",
                    self.nodes[x.0].value.shape(),
                    self.nodes[p].value.shape(),
                ));
            }
        }
        let eps_t = T::from_f64(eps);
        let (means, inv_stds) =
            kernels::layer_norm_stats(self.nodes[x.0].value.data(), width, eps_t);
        let mut out = Tensor::zeros(self.nodes[x.0].value.shape());
        kernels::layer_norm_forward(
            self.nodes[x.0].value.data(),
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            &means,
            &inv_stds,
            out.data_mut(),
            width,
        );
        let rg = self.req(&[x.0, gamma.0, beta.0]);
        self.push(
            out,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, means, inv_stds },
            rg,
        )
    }

    /// Strided 2-D convolution with zero padding and a square kernel.
    /// `input` is `[batch, c_in, h, w]`, `weight` is `[c_out, c_in, k, k]`,
    /// `bias` is `[c_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let si = self.nodes[input.0].value.shape().to_vec();
        let sw = self.nodes[weight.0].value.shape().to_vec();
        if si.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || si[1] != sw[1] {
            return Err(shape_err("conv2d", &si, &sw));
        }
        if self.nodes[bias.0].value.shape() != [sw[0]] {
            return Err(shape_err("conv2d", &sw, self.nodes[bias.0].value.shape()));
        }
        let geom = Conv2dGeom {
            batch: si[0],
            c_in: si[1],
            h_in: si[2],
            w_in: si[3],
            c_out: sw[0],
            kernel: sw[2],
            stride,
            pad,
        };
        if geom.h_in + 2 * pad < geom.kernel || geom.w_in + 2 * pad < geom.kernel {
            return Err(invalid("conv2d", "input smaller than kernel"));
        }
        let mut out = Tensor::zeros(&[geom.batch, geom.c_out, geom.h_out(), geom.w_out()]);
        kernels::conv2d_forward(
            self.nodes[input.0].value.data(),
            self.nodes[weight.0].value.data(),
            self.nodes[bias.0].value.data(),
            out.data_mut(),
            geom,
        );
        let rg = self.req(&[input.0, weight.0, bias.0]);
        self.push(out, Op::Conv2d { input: input.0, weight: weight.0, bias: bias.0, geom }, rg)
    }

    /// Row lookup: `table` is `[vocab, d]`, output is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.nodes[table.0].value.shape().to_vec();
        if st.len() != 2 {
            return Err(shape_err("embedding", &st, &[ids.len()]));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(invalid("embedding", format!("id {bad} out of range (vocab {vocab})")));
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        {
            let t = self.nodes[table.0].value.data();
            let o = out.data_mut();
            for (r, &id) in ids.iter().enumerate() {
                o[r * d..(r + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
            }
        }
        let rg = self.req(&[table.0]);
        self.push(out, Op::Embedding { table: table.0, ids: ids.to_vec() }, rg)
    }

    /// Concatenate along `axis`. All inputs must agree on every other axis.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(invalid("concat", format!("axis {axis} out of range")));
        }
        let mut axis_total = 0;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err("concat", &first, s));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        {
            let o = out.data_mut();
            let mut axis_off = 0;
            for v in inputs {
                let s_axis = self.nodes[v.0].value.shape()[axis];
                let data = self.nodes[v.0].value.data();
                for b in 0..outer {
                    let src = &data[b * s_axis * inner..(b + 1) * s_axis * inner];
                    let dst_start = (b * axis_total + axis_off) * inner;
                    o[dst_start..dst_start + s_axis * inner].copy_from_slice(src);
                }
                axis_off += s_axis;
            }
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.req(&ids);
        self.push(out, Op::Concat { inputs: ids, axis }, rg)
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.nodes[a.0].value.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} out of bounds for axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(&out_shape);
        {
            let data = self.nodes[a.0].value.data();
            let o = out.data_mut();
            for b in 0..outer {
                let src_start = (b * s[axis] + start) * inner;
                o[b * len * inner..(b + 1) * len * inner]
                    .copy_from_slice(&data[src_start..src_start + len * inner]);
            }
        }
        let rg = self.req(&[a.0]);
        self.push(out, Op::Slice { a: a.0, axis, start }, rg)
    }

    /// Swap two axes (with data movement; the result is contiguous).
    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        let s = self.nodes[a.0].value.shape().to_vec();
        if ax0 >= s.len() || ax1 >= s.len() {
            return Err(invalid("transpose", format!("axes ({ax0},{ax1}) out of range for {s:?}")));
        }
        let out = transpose_copy(&self.nodes[a.0].value, ax0, ax1);
        let rg = self.req(&[a.0]);
        self.push(out, Op::Transpose { a: a.0, ax0, ax1 }, rg)
    }

    /// Reinterpret the shape; element count must be unchanged.
    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.clone().reshaped(new_shape)?;
        let rg = self.req(&[a.0]);
        self.push(out, Op::Reshape { a: a.0 }, rg)
    }

    /// Inverted dropout: at train time each coordinate is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1−rate); at eval
    /// time this is the identity (no node is recorded).
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0,1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let node_id = self.nodes.len() as u64;
        let mut stream = Stream::derived(self.root_seed, "dropout", &[self.step, node_id]);
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if stream.uniform() < rate { T::zero() } else { keep_scale })
            .collect();
        let mut out = self.nodes[a.0].value.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v = *v * m;
        }
        let rg = self.req(&[a.0]);
        self.push(out, Op::Dropout { a: a.0, mask }, rg)
    }

    /// Rearrange the rows of `a` (all leading axes flattened, last axis is
    /// the row): row `r` of the output is row `sources[r]` of the input, or
    /// zero when `sources[r]` is `None`. Gradients scatter-add back to the
    /// source rows, so rows copied to several places accumulate.
    pub fn mask_rows(&mut self, a: Var, sources: &[Option<usize>]) -> Result<Var> {
        let shape = self.nodes[a.0].value.shape().to_vec();
        if shape.len() < 2 {
            return Err(invalid("mask_rows", format!("need rank ≥ 2, got {shape:?}")));
        }
        let d = shape[shape.len() - 1];
        let rows = self.nodes[a.0].value.numel() / d;
        if sources.len() != rows {
            return Err(invalid(
                "mask_rows",
                format!("{} source entries for {rows} rows", sources.len()),
            ));
        }
        if let Some(bad) = sources.iter().flatten().find(|&&s| s >= rows) {
            return Err(invalid("mask_rows", format!("source row {bad} out of {rows}")));
        }
        let mut out = Tensor::zeros(&shape);
        {
            let src = self.nodes[a.0].value.data();
            let dst = out.data_mut();
            for (r, source) in sources.iter().enumerate() {
                if let Some(s) = source {
                    dst[r * d..(r + 1) * d].copy_from_slice(&src[s * d..(s + 1) * d]);
                }
            }
        }
        let rg = self.req(&[a.0]);
        self.push(out, Op::MaskRows { a: a.0, sources: sources.to_vec() }, rg)
    }

    /// Multiply every coordinate by a compile-time-known constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out = self.nodes[a.0].value.map(|v| v * c);
        let rg = self.req(&[a.0]);
        self.push(out, Op::Scale { a: a.0, c }, rg)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v.abs());
        let rg = self.req(&[a.0]);
        self.push(out, Op::Abs { a: a.0 }, rg)
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: T = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.req(&[a.0]);
        self.push(Tensor::scalar(total), Op::Sum { a: a.0 }, rg)
    }

    /// a − b (with `b` broadcastable against `a`).
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Mean over all coordinates.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Label-smoothed cross entropy, averaged over included positions.
    ///
    /// `logits` is `[rows, vocab]` after flattening leading axes; `targets`
    /// gives the true class per row and `include` gates rows out of the loss
    /// (padding). The smoothed distribution places 1−ε on the target class
    /// and ε/(vocab−1) on every other class.
    pub fn cross_entropy_label_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        include: &[bool],
        epsilon: f64,
    ) -> Result<Var> {
        let width = self.last_width("cross_entropy_ls", logits)?;
        let rows = self.nodes[logits.0].value.numel() / width;
        if targets.len() != rows || include.len() != rows {
            return Err(invalid(
                "cross_entropy_ls",
                format!("{} targets / {} flags for {} rows", targets.len(), include.len(), rows),
            ));
        }
        if width < 2 {
            return Err(invalid("cross_entropy_ls", "vocab must have at least 2 entries"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= width) {
            return Err(invalid("cross_entropy_ls", format!("target {bad} out of range")));
        }
        let count = include.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(invalid("cross_entropy_ls", "no rows included in the loss"));
        }
        let on = 1.0 - epsilon;
        let off = epsilon / (width as f64 - 1.0);
        let mut total = 0.0f64;
        {
            let data = self.nodes[logits.0].value.data();
            for r in 0..rows {
                if !include[r] {
                    continue;
                }
                let row = &data[r * width..(r + 1) * width];
                let mut max = row[0];
                for &v in row.iter() {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                for &v in row.iter() {
                    sum = sum + (v - max).exp();
                }
                let lse = (max + sum.ln()).to_f64();
                // −Σ_k q_k (x_k − lse) with q as described above.
                let mut dot = 0.0;
                for (k, &v) in row.iter().enumerate() {
                    let q = if k == targets[r] { on } else { off };
                    dot += q * (v.to_f64() - lse);
                }
                total -= dot;
            }
        }
        let value = Tensor::scalar(T::from_f64(total / count as f64));
        let rg = self.req(&[logits.0]);
        self.push(
            value,
            Op::CrossEntropyLs {
                logits: logits.0,
                targets: targets.to_vec(),
                include: include.to_vec(),
                epsilon,
            },
            rg,
        )
    }

    /// Record a scalar value computed outside the tape together with its
    /// gradient with respect to `input`.
    pub fn custom_scalar(&mut self, input: Var, value: f64, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.nodes[input.0].value.shape() {
            return Err(shape_err("custom", self.nodes[input.0].value.shape(), grad.shape()));
        }
        if !grad.all_finite() {
            return Err(NumericsError::NonFiniteGrad { op: "custom" });
        }
        let rg = self.req(&[input.0]);
        self.push(Tensor::scalar(T::from_f64(value)), Op::Custom { a: input.0, grad }, rg)
    }

    fn last_width(&self, op: &'static str, a: Var) -> Result<usize> {
        let s = self.nodes[a.0].value.shape();
        if s.is_empty() {
            return Err(invalid(op, "input must have at least one axis"));
        }
        let w = s[s.len() - 1];
        if w == 0 {
            return Err(invalid(op, "last axis is empty"));
        }
        Ok(w)
    }

    /// Run reverse accumulation from a scalar `loss`, consuming the tape.
    /// Returns gradients for every registered parameter (zeros for params the
    /// loss does not depend on).
    pub fn backward(self, loss: Var) -> Result<GradStore<T>> {
        let Tape { nodes, param_ids, .. } = self;
        if !nodes[loss.0].value.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..nodes.len()).rev() {
            let Some(g_out) = grads[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            let op_name = nodes[i].op.name();
            if !g_out.all_finite() {
                return Err(NumericsError::NonFiniteGrad { op: op_name });
            }
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(g_out); // keep for parameter extraction
                continue;
            }
            backprop_one(&nodes, i, &g_out, &mut grads)?;
        }

        let mut by_name = BTreeMap::new();
        for (name, &id) in &param_ids {
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(nodes[id].value.shape()));
            by_name.insert(name.clone(), g);
        }
        Ok(GradStore { grads: by_name })
    }
}

fn transpose_copy<T: Scalar>(t: &Tensor<T>, ax0: usize, ax1: usize) -> Tensor<T> {
    let s = t.shape();
    let mut out_shape = s.to_vec();
    out_shape.swap(ax0, ax1);
    if ax0 == ax1 {
        return t.clone();
    }
    let in_strides = strides(s);
    let out_strides = strides(&out_shape);
    let mut out = Tensor::zeros(&out_shape);
    {
        let src = t.data();
        let dst = out.data_mut();
        let numel = src.len();
        for (out_flat, slot) in dst.iter_mut().enumerate().take(numel) {
            let mut rem = out_flat;
            let mut in_flat = 0;
            for (axis, &os) in out_strides.iter().enumerate() {
                let coord = rem / os;
                rem %= os;
                let in_axis = if axis == ax0 {
                    ax1
                } else if axis == ax1 {
                    ax0
                } else {
                    axis
                };
                in_flat += coord * in_strides[in_axis];
            }
            *slot = src[in_flat];
        }
    }
    out
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Accumulate `g_out` (shaped like the broadcast target) back into the
/// possibly-smaller shape of the broadcast operand.
fn reduce_to_shape<T: Scalar>(g_out: &[T], target: &[usize], small: &[usize]) -> Tensor<T> {
    let bs = broadcast_strides("add", small, target).expect("validated in forward");
    let mut out = Tensor::zeros(small);
    {
        let o = out.data_mut();
        for_each_broadcast(target, &bs, |i, j| {
            o[j] = o[j] + g_out[i];
        });
    }
    out
}

fn backprop_one<T: Scalar>(
    nodes: &[Node<T>],
    i: usize,
    g_out: &Tensor<T>,
    grads: &mut Vec<Option<Tensor<T>>>,
) -> Result<()> {
    let needs = |id: usize| nodes[id].requires_grad;
    match &nodes[i].op {
        Op::Leaf => unreachable!("handled by caller"),
        Op::Add { a, b } => {
            if needs(*a) {
                acc(grads, *a, g_out.clone());
            }
            if needs(*b) {
                let g = reduce_to_shape(
                    g_out.data(),
                    nodes[*a].value.shape(),
                    nodes[*b].value.shape(),
                );
                acc(grads, *b, g);
            }
        }
        Op::Mul { a, b } => {
            let sa = nodes[*a].value.shape();
            let sb = nodes[*b].value.shape();
            let bs = broadcast_strides("mul", sb, sa).expect("validated in forward");
            if needs(*a) {
                let mut g = g_out.clone();
                let b_data = nodes[*b].value.data();
                {
                    let gd = g.data_mut();
                    for_each_broadcast(sa, &bs, |x, y| {
                        gd[x] = gd[x] * b_data[y];
                    });
                }
                acc(grads, *a, g);
            }
            if needs(*b) {
                let mut g = Tensor::zeros(sb);
                let a_data = nodes[*a].value.data();
                let go = g_out.data();
                {
                    let gd = g.data_mut();
                    for_each_broadcast(sa, &bs, |x, y| {
                        gd[y] = gd[y] + go[x] * a_data[x];
                    });
                }
                acc(grads, *b, g);
            }
        }
        Op::Matmul { a, b } => {
            let sa = nodes[*a].value.shape().to_vec();
            let sb = nodes[*b].value.shape().to_vec();
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = sb[sb.len() - 1];
            let lead: usize = sa[..sa.len() - 2].iter().product();
            let batched = sb.len() > 2;
            let a_data = nodes[*a].value.data();
            let b_data = nodes[*b].value.data();
            let go = g_out.data();
            if needs(*a) {
                let mut g = Tensor::zeros(&sa);
                {
                    let gd = g.data_mut();
                    if batched {
                        for l in 0..lead {
                            kernels::matmul_nt(
                                &go[l * m * n..(l + 1) * m * n],
                                &b_data[l * k * n..(l + 1) * k * n],
                                &mut gd[l * m * k..(l + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    } else {
                        kernels::matmul_nt(go, b_data, gd, lead * m, n, k);
                    }
                }
                acc(grads, *a, g);
            }
            if needs(*b) {
                let mut g = Tensor::zeros(&sb);
                {
                    let gd = g.data_mut();
                    if batched {
                        for l in 0..lead {
                            kernels::matmul_tn(
                                &a_data[l * m * k..(l + 1) * m * k],
                                &go[l * m * n..(l + 1) * m * n],
                                &mut gd[l * k * n..(l + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    } else {
                        kernels::matmul_tn(a_data, go, gd, lead * m, k, n);
                    }
                }
                acc(grads, *b, g);
            }
        }
        Op::Relu { a } => {
            if needs(*a) {
                let mut g = g_out.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(nodes[*a].value.data()) {
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                }
                acc(grads, *a, g);
            }
        }
        Op::Softmax { a } => {
            if needs(*a) {
                let s = nodes[i].value.shape();
                let width = s[s.len() - 1];
                let mut g = Tensor::zeros(s);
                kernels::softmax_backward_rows(
                    nodes[i].value.data(),
                    g_out.data(),
                    g.data_mut(),
                    width,
                );
                acc(grads, *a, g);
            }
        }
        Op::LogSoftmax { a } => {
            if needs(*a) {
                let s = nodes[i].value.shape();
                let width = s[s.len() - 1];
                let y = nodes[i].value.data();
                let go = g_out.data();
                let mut g = Tensor::zeros(s);
                {
                    let gd = g.data_mut();
                    for r in 0..y.len() / width {
                        let range = r * width..(r + 1) * width;
                        let mut row_sum = T::zero();
                        for &v in &go[range.clone()] {
                            row_sum = row_sum + v;
                        }
                        for ((gv, &dv), &yv) in
                            gd[range.clone()].iter_mut().zip(&go[range.clone()]).zip(&y[range])
                        {
                            *gv = dv - yv.exp() * row_sum;
                        }
                    }
                }
                acc(grads, *a, g);
            }
        }
        Op::LogSumExp { a } => {
            if needs(*a) {
                let sx = nodes[*a].value.shape();
                let width = sx[sx.len() - 1];
                let x = nodes[*a].value.data();
                let lse = nodes[i].value.data();
                let go = g_out.data();
                let mut g = Tensor::zeros(sx);
                {
                    let gd = g.data_mut();
                    for r in 0..lse.len() {
                        for j in 0..width {
                            gd[r * width + j] = go[r] * (x[r * width + j] - lse[r]).exp();
                        }
                    }
                }
                acc(grads, *a, g);
            }
        }
        Op::LayerNorm { x, gamma, beta, means, inv_stds } => {
            let width = nodes[*gamma].value.numel();
            let xd = nodes[*x].value.data();
            let go = g_out.data();
            if needs(*x) {
                let mut g = Tensor::zeros(nodes[*x].value.shape());
                kernels::layer_norm_backward_x(
                    xd,
                    nodes[*gamma].value.data(),
                    means,
                    inv_stds,
                    go,
                    g.data_mut(),
                    width,
                );
                acc(grads, *x, g);
            }
            if needs(*gamma) || needs(*beta) {
                let mut dg = Tensor::zeros(&[width]);
                let mut db = Tensor::zeros(&[width]);
                {
                    let dgd = dg.data_mut();
                    let dbd = db.data_mut();
                    for r in 0..xd.len() / width {
                        let (mu, is) = (means[r], inv_stds[r]);
                        for j in 0..width {
                            let xhat = (xd[r * width + j] - mu) * is;
                            let dv = go[r * width + j];
                            dgd[j] = dgd[j] + dv * xhat;
                            dbd[j] = dbd[j] + dv;
                        }
                    }
                }
                if needs(*gamma) {
                    acc(grads, *gamma, dg);
                }
                if needs(*beta) {
                    acc(grads, *beta, db);
                }
            }
        }
        Op::Conv2d { input, weight, bias, geom } => {
            let mut d_in = Tensor::zeros(nodes[*input].value.shape());
            let mut d_w = Tensor::zeros(nodes[*weight].value.shape());
            let mut d_b = Tensor::zeros(nodes[*bias].value.shape());
            kernels::conv2d_backward(
                nodes[*input].value.data(),
                nodes[*weight].value.data(),
                g_out.data(),
                d_in.data_mut(),
                d_w.data_mut(),
                d_b.data_mut(),
                *geom,
            );
            if needs(*input) {
                acc(grads, *input, d_in);
            }
            if needs(*weight) {
                acc(grads, *weight, d_w);
            }
            if needs(*bias) {
                acc(grads, *bias, d_b);
            }
        }
        Op::Embedding { table, ids } => {
            if needs(*table) {
                let d = nodes[*table].value.shape()[1];
                let mut g = Tensor::zeros(nodes[*table].value.shape());
                {
                    let gd = g.data_mut();
                    let go = g_out.data();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gd[id * d + j] = gd[id * d + j] + go[r * d + j];
                        }
                    }
                }
                acc(grads, *table, g);
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = nodes[i].value.shape().to_vec();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let axis_total = out_shape[*axis];
            let go = g_out.data();
            let mut axis_off = 0;
            for &inp in inputs {
                let s_axis = nodes[inp].value.shape()[*axis];
                if needs(inp) {
                    let mut g = Tensor::zeros(nodes[inp].value.shape());
                    {
                        let gd = g.data_mut();
                        for b in 0..outer {
                            let src_start = (b * axis_total + axis_off) * inner;
                            gd[b * s_axis * inner..(b + 1) * s_axis * inner]
                                .copy_from_slice(&go[src_start..src_start + s_axis * inner]);
                        }
                    }
                    acc(grads, inp, g);
                }
                axis_off += s_axis;
            }
        }
        Op::Slice { a, axis, start } => {
            if needs(*a) {
                let in_shape = nodes[*a].value.shape().to_vec();
                let out_shape = nodes[i].value.shape();
                let len = out_shape[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let mut g = Tensor::zeros(&in_shape);
                {
                    let gd = g.data_mut();
                    let go = g_out.data();
                    for b in 0..outer {
                        let dst_start = (b * in_shape[*axis] + start) * inner;
                        gd[dst_start..dst_start + len * inner]
                            .copy_from_slice(&go[b * len * inner..(b + 1) * len * inner]);
                    }
                }
                acc(grads, *a, g);
            }
        }
        Op::Transpose { a, ax0, ax1 } => {
            if needs(*a) {
                acc(grads, *a, transpose_copy(g_out, *ax0, *ax1));
            }
        }
        Op::Reshape { a } => {
            if needs(*a) {
                let g = g_out
                    .clone()
                    .reshaped(nodes[*a].value.shape())
                    .expect("shapes validated in forward");
                acc(grads, *a, g);
            }
        }
        Op::Dropout { a, mask } => {
            if needs(*a) {
                let mut g = g_out.clone();
                for (gv, &m) in g.data_mut().iter_mut().zip(mask) {
                    *gv = *gv * m;
                }
                acc(grads, *a, g);
            }
        }
        Op::MaskRows { a, sources } => {
            if needs(*a) {
                let shape = nodes[*a].value.shape();
                let d = shape[shape.len() - 1];
                let mut g = Tensor::zeros(shape);
                {
                    let gd = g.data_mut();
                    let go = g_out.data();
                    for (r, source) in sources.iter().enumerate() {
                        if let Some(s) = source {
                            for j in 0..d {
                                gd[s * d + j] = gd[s * d + j] + go[r * d + j];
                            }
                        }
                    }
                }
                acc(grads, *a, g);
            }
        }
        Op::Scale { a, c } => {
            if needs(*a) {
                let g = g_out.map(|v| v * *c);
                acc(grads, *a, g);
            }
        }
        Op::Abs { a } => {
            if needs(*a) {
                let mut g = g_out.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(nodes[*a].value.data()) {
                    *gv = if xv > T::zero() {
                        *gv
                    } else if xv < T::zero() {
                        T::zero() - *gv
                    } else {
                        T::zero()
                    };
                }
                acc(grads, *a, g);
            }
        }
        Op::Sum { a } => {
            if needs(*a) {
                acc(grads, *a, Tensor::full(nodes[*a].value.shape(), g_out.item()));
            }
        }
        Op::CrossEntropyLs { logits, targets, include, epsilon } => {
            if needs(*logits) {
                let s = nodes[*logits].value.shape();
                let width = s[s.len() - 1];
                let rows = nodes[*logits].value.numel() / width;
                let count = include.iter().filter(|&&b| b).count();
                let upstream = g_out.item().to_f64() / count as f64;
                let on = T::from_f64((1.0 - epsilon) * upstream);
                let off = T::from_f64(epsilon / (width as f64 - 1.0) * upstream);
                let x = nodes[*logits].value.data();
                let mut g = Tensor::zeros(s);
                {
                    let gd = g.data_mut();
                    let up = T::from_f64(upstream);
                    for r in 0..rows {
                        if !include[r] {
                            continue;
                        }
                        let row = &x[r * width..(r + 1) * width];
                        let mut max = row[0];
                        for &v in row.iter() {
                            if v > max {
                                max = v;
                            }
                        }
                        let mut sum = T::zero();
                        for &v in row.iter() {
                            sum = sum + (v - max).exp();
                        }
                        for (k, &v) in row.iter().enumerate() {
                            let p = (v - max).exp() / sum;
                            let q = if k == targets[r] { on } else { off };
                            gd[r * width + k] = p * up - q;
                        }
                    }
                }
                acc(grads, *logits, g);
            }
        }
        Op::Custom { a, grad } => {
            if needs(*a) {
                let up = g_out.item();
                let g = grad.map(|v| v * up);
                acc(grads, *a, g);
            }
        }
    }
    Ok(())
}
