//! Shared finite-difference sweep definitions.
//!
//! Each sweep pins down one differentiable op: it builds seeded random
//! parameters, routes them through the op into a scalar loss, and compares
//! the tape's analytic gradients against central differences. Both the
//! per-op property tests and the acceptance run drive the same list, so a
//! regression in either place is the same regression.

use std::collections::BTreeMap;

use jct_core::numerics::gradcheck::{grad_check, GradCheckOpts, GradCheckReport};
use jct_core::numerics::rng::Stream;
use jct_core::numerics::tape::{GradStore, Tape, Var};
use jct_core::Tensor;

pub type Params = BTreeMap<String, Tensor<f64>>;

pub struct OpSweep {
    pub name: &'static str,
    pub run: fn(u64) -> GradCheckReport,
}

fn rand_tensor(stream: &mut Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| stream.uniform_in(lo, hi)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Random values bounded away from zero, for ops with a kink there.
fn rand_tensor_off_zero(stream: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = stream.uniform_in(0.2, 1.0);
            if stream.uniform() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Project a tensor to a scalar through a fixed random weighting, so the
/// upstream gradient reaching the op under test is nontrivial.
fn project_to_scalar(
    tape: &mut Tape<f64>,
    v: Var,
    stream: &mut Stream,
) -> jct_core::numerics::Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = rand_tensor(stream, &shape, -1.0, 1.0);
    let wc = tape.constant(&w)?;
    let prod = tape.mul(v, wc)?;
    tape.sum(prod)
}

fn check<F>(params: &Params, f: F) -> GradCheckReport
where
    F: FnMut(&Params, bool) -> jct_core::numerics::Result<(f64, Option<GradStore<f64>>)>,
{
    grad_check(params, f, &GradCheckOpts::default()).expect("gradient check ran")
}

/// Run a sweep whose graph is `build(tape, params)` projected to a scalar.
fn sweep_with<B>(seed: u64, params: Params, build: B) -> GradCheckReport
where
    B: Fn(&mut Tape<f64>, &Params) -> jct_core::numerics::Result<Var>,
{
    check(&params, |p, want_grad| {
        let mut tape: Tape<f64> = Tape::new(seed, 0, false);
        let out = build(&mut tape, p)?;
        let mut proj = Stream::derived(seed, "proj", &[]);
        let loss = project_to_scalar(&mut tape, out, &mut proj)?;
        let value = tape.value(loss).item();
        let grads = if want_grad { Some(tape.backward(loss)?) } else { None };
        Ok((value, grads))
    })
}

fn sweep_add(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("a".into(), rand_tensor(&mut s, &[3, 4], -1.0, 1.0));
    params.insert("b".into(), rand_tensor(&mut s, &[4], -1.0, 1.0));
    params.insert("c".into(), rand_tensor(&mut s, &[3, 1], -1.0, 1.0));
    sweep_with(seed, params, |tape, p| {
        let a = tape.param("a", &p["a"])?;
        let b = tape.param("b", &p["b"])?;
        let c = tape.param("c", &p["c"])?;
        let ab = tape.add(a, b)?; // trailing broadcast
        tape.add(ab, c) // length-1 axis broadcast
    })
}

fn sweep_mul(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("a".into(), rand_tensor(&mut s, &[3, 4], -1.0, 1.0));
    params.insert("b".into(), rand_tensor(&mut s, &[4], 0.5, 1.5));
    params.insert("c".into(), rand_tensor(&mut s, &[3, 1], 0.5, 1.5));
    sweep_with(seed, params, |tape, p| {
        let a = tape.param("a", &p["a"])?;
        let b = tape.param("b", &p["b"])?;
        let c = tape.param("c", &p["c"])?;
        let ab = tape.mul(a, b)?;
        tape.mul(ab, c)
    })
}

fn sweep_matmul(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("a".into(), rand_tensor(&mut s, &[2, 3, 4], -1.0, 1.0));
    params.insert("w".into(), rand_tensor(&mut s, &[4, 5], -1.0, 1.0));
    params.insert("b".into(), rand_tensor(&mut s, &[2, 5, 3], -1.0, 1.0));
    sweep_with(seed, params, |tape, p| {
        let a = tape.param("a", &p["a"])?;
        let w = tape.param("w", &p["w"])?;
        let b = tape.param("b", &p["b"])?;
        let aw = tape.matmul(a, w)?; // rank-2 weight applied per batch
        tape.matmul(aw, b) // fully batched product
    })
}

fn sweep_relu(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor_off_zero(&mut s, &[4, 6]));
    sweep_with(seed, params, |tape, p| {
        let x = tape.param("x", &p["x"])?;
        tape.relu(x)
    })
}

fn sweep_softmax(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(&mut s, &[3, 5], -2.0, 2.0));
    sweep_with(seed, params, |tape, p| {
        let x = tape.param("x", &p["x"])?;
        tape.softmax(x)
    })
}

fn sweep_log_softmax(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(&mut s, &[3, 5], -2.0, 2.0));
    sweep_with(seed, params, |tape, p| {
        let x = tape.param("x", &p["x"])?;
        tape.log_softmax(x)
    })
}

fn sweep_log_sum_exp(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(&mut s, &[4, 3], -2.0, 2.0));
    sweep_with(seed, params, |tape, p| {
        let x = tape.param("x", &p["x"])?;
        tape.log_sum_exp(x)
    })
}

fn sweep_layer_norm(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(&mut s, &[3, 6], -1.0, 1.0));
    params.insert("gamma".into(), rand_tensor(&mut s, &[6], 0.5, 1.5));
    params.insert("beta".into(), rand_tensor(&mut s, &[6], -0.5, 0.5));
    sweep_with(seed, params, |tape, p| {
        let x = tape.param("x", &p["x"])?;
        let g = tape.param("gamma", &p["gamma"])?;
        let b = tape.param("beta", &p["beta"])?;
        tape.layer_norm(x, g, b, 1e-5)
    })
}

fn sweep_conv2d(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(&mut s, &[2, 2, 5, 6], -1.0, 1.0));
    params.insert("w".into(), rand_tensor(&mut s, &[3, 2, 3, 3], -0.5, 0.5));
    params.insert("b".into(), rand_tensor(&mut s, &[3], -0.2, 0.2));
    sweep_with(seed, params, |tape, p| {
        let x = tape.param("x", &p["x"])?;
        let w = tape.param("w", &p["w"])?;
        let b = tape.param("b", &p["b"])?;
        tape.conv2d(x, w, b, 2, 1)
    })
}

fn sweep_embedding(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("table".into(), rand_tensor(&mut s, &[5, 3], -1.0, 1.0));
    sweep_with(seed, params, |tape, p| {
        let t = tape.param("table", &p["table"])?;
        tape.embedding(t, &[4, 0, 2, 4, 1])
    })
}

fn sweep_concat_slice(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("a".into(), rand_tensor(&mut s, &[2, 3], -1.0, 1.0));
    params.insert("b".into(), rand_tensor(&mut s, &[2, 4], -1.0, 1.0));
    sweep_with(seed, params, |tape, p| {
        let a = tape.param("a", &p["a"])?;
        let b = tape.param("b", &p["b"])?;
        let glued = tape.concat(&[a, b], 1)?;
        tape.slice(glued, 1, 1, 5)
    })
}

fn sweep_transpose_reshape(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(&mut s, &[2, 3, 4], -1.0, 1.0));
    sweep_with(seed, params, |tape, p| {
        let x = tape.param("x", &p["x"])?;
        let t = tape.transpose(x, 0, 2)?;
        tape.reshape(t, &[6, 4])
    })
}

fn sweep_dropout(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(&mut s, &[4, 8], -1.0, 1.0));
    // Training-mode tape: the mask is a deterministic function of
    // (seed, step, node id), so the loss stays differentiable under
    // perturbation and central differences see a fixed mask.
    check(&params, move |p, want_grad| {
        let mut tape: Tape<f64> = Tape::new(seed, 7, true);
        let x = tape.param("x", &p["x"])?;
        let d = tape.dropout(x, 0.3)?;
        let mut proj = Stream::derived(seed, "proj", &[]);
        let loss = project_to_scalar(&mut tape, d, &mut proj)?;
        let value = tape.value(loss).item();
        let grads = if want_grad { Some(tape.backward(loss)?) } else { None };
        Ok((value, grads))
    })
}

fn sweep_scale_abs_sub(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("a".into(), rand_tensor_off_zero(&mut s, &[3, 4]));
    params.insert("b".into(), rand_tensor(&mut s, &[3, 4], 2.0, 3.0));
    sweep_with(seed, params, |tape, p| {
        let a = tape.param("a", &p["a"])?;
        let b = tape.param("b", &p["b"])?;
        // |a − b| stays away from the kink: a ∈ ±[0.2,1], b ∈ [2,3].
        let d = tape.sub(a, b)?;
        let ad = tape.abs(d)?;
        tape.scale(ad, 1.7)
    })
}

fn sweep_sum_mean(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(&mut s, &[5, 2], -1.0, 1.0));
    check(&params, move |p, want_grad| {
        let mut tape: Tape<f64> = Tape::new(seed, 0, false);
        let x = tape.param("x", &p["x"])?;
        let sq = tape.mul(x, x)?;
        let m = tape.mean(sq)?;
        let value = tape.value(m).item();
        let grads = if want_grad { Some(tape.backward(m)?) } else { None };
        Ok((value, grads))
    })
}

fn sweep_cross_entropy_ls(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("logits".into(), rand_tensor(&mut s, &[4, 6], -2.0, 2.0));
    let targets = vec![2, 0, 5, 3];
    let include = vec![true, true, false, true];
    check(&params, move |p, want_grad| {
        let mut tape: Tape<f64> = Tape::new(seed, 0, false);
        let x = tape.param("logits", &p["logits"])?;
        let loss = tape.cross_entropy_label_smoothed(x, &targets, &include, 0.1)?;
        let value = tape.value(loss).item();
        let grads = if want_grad { Some(tape.backward(loss)?) } else { None };
        Ok((value, grads))
    })
}

fn sweep_mask_rows(seed: u64) -> GradCheckReport {
    let mut s = Stream::derived(seed, "init", &[]);
    let mut params = Params::new();
    params.insert("x".into(), rand_tensor(&mut s, &[2, 5, 3], -1.0, 1.0));
    // Random row plan: zeroed rows, swapped rows (some sources repeated so
    // scatter-add accumulation is exercised), and identity rows.
    let rows = 10;
    let sources: Vec<Option<usize>> = (0..rows)
        .map(|r| match s.below(4) {
            0 => None,
            1 => Some(s.below(rows)),
            _ => Some(r),
        })
        .collect();
    check(&params, move |p, want_grad| {
        let mut tape: Tape<f64> = Tape::new(seed, 0, false);
        let x = tape.param("x", &p["x"])?;
        let m = tape.mask_rows(x, &sources)?;
        let mut proj = Stream::derived(seed, "proj", &[]);
        let loss = project_to_scalar(&mut tape, m, &mut proj)?;
        let value = tape.value(loss).item();
        let grads = if want_grad { Some(tape.backward(loss)?) } else { None };
        Ok((value, grads))
    })
}

/// Every differentiable op exposed by the tape, each with its own sweep.
pub fn op_sweeps() -> Vec<OpSweep> {
    vec![
        OpSweep { name: "add", run: sweep_add },
        OpSweep { name: "mul", run: sweep_mul },
        OpSweep { name: "matmul", run: sweep_matmul },
        OpSweep { name: "relu", run: sweep_relu },
        OpSweep { name: "softmax", run: sweep_softmax },
        OpSweep { name: "log_softmax", run: sweep_log_softmax },
        OpSweep { name: "log_sum_exp", run: sweep_log_sum_exp },
        OpSweep { name: "layer_norm", run: sweep_layer_norm },
        OpSweep { name: "conv2d", run: sweep_conv2d },
        OpSweep { name: "embedding", run: sweep_embedding },
        OpSweep { name: "concat_slice", run: sweep_concat_slice },
        OpSweep { name: "transpose_reshape", run: sweep_transpose_reshape },
        OpSweep { name: "dropout", run: sweep_dropout },
        OpSweep { name: "scale_abs_sub", run: sweep_scale_abs_sub },
        OpSweep { name: "sum_mean", run: sweep_sum_mean },
        OpSweep { name: "cross_entropy_ls", run: sweep_cross_entropy_ls },
        OpSweep { name: "mask_rows", run: sweep_mask_rows },
    ]
}
