//! CTC loss, decoding, and a brute-force enumeration oracle.
//!
//! The loss is the standard forward-backward recursion over the extended
//! label sequence (blanks interleaved), done entirely in log space; the
//! probability-space recursion exists only inside [`ctc_brute_force`], which
//! enumerates every alignment path and is the oracle the lattice is tested
//! against. All lattice arithmetic runs in f64 regardless of the model's
//! scalar type — f32 underflows past a few dozen frames.
//!
//! Blank is class id 0 throughout.

use crate::numerics::par;
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::{NumericsError, Result};

/// Class id reserved for the CTC blank.
pub const BLANK: usize = 0;

/// Loss and gradient for one utterance.
#[derive(Debug, Clone)]
pub struct CtcOutcome<T: Scalar> {
    /// −log P(labels | log_probs); +∞ when infeasible.
    pub loss: f64,
    /// d loss / d log_probs, same shape as the input; zero when infeasible.
    pub grad: Tensor<T>,
    /// True when no alignment exists (T < L + adjacent repeats).
    pub infeasible: bool,
}

/// A decoded label sequence with its total log probability.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcHypothesis {
    pub labels: Vec<usize>,
    pub log_prob: f64,
}

fn invalid(msg: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument { op: "ctc", msg: msg.into() }
}

/// Number of adjacent equal pairs in `labels`.
pub fn repeats(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// An alignment exists iff the frame count covers every label plus a
/// separating blank between each adjacent repeat.
pub fn is_feasible(t_len: usize, labels: &[usize]) -> bool {
    t_len >= labels.len() + repeats(labels)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn validate_inputs<T: Scalar>(log_probs: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let shape = log_probs.shape();
    if shape.len() != 2 {
        return Err(invalid(format!("log_probs must be [T, V], got {shape:?}")));
    }
    let (t_len, vocab) = (shape[0], shape[1]);
    if vocab < 2 {
        return Err(invalid("vocabulary must contain blank plus at least one label"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= vocab) {
        return Err(invalid(format!("label id {bad} invalid for vocab size {vocab}")));
    }
    Ok((t_len, vocab))
}

/// Extended label sequence: blank, l₁, blank, l₂, …, blank (length 2L+1).
fn extend_labels(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

struct Lattice {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_total: f64,
    t_len: usize,
    s_len: usize,
}

/// Forward-backward over the extended-label lattice. Both α and β include
/// the emission term at their own frame, so the path total through any cell
/// is α + β − emission.
fn forward_backward(lp: &[f64], t_len: usize, vocab: usize, ext: &[usize]) -> Lattice {
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    let mut beta = vec![ninf; t_len * s_len];
    let emit = |t: usize, s: usize| lp[t * vocab + ext[s]];

    alpha[0] = emit(0, 0);
    if s_len > 1 {
        alpha[1] = emit(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            // The s−2 skip is legal only into a non-blank that differs from
            // the non-blank two slots back (blank-separated repeats).
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + emit(t, s);
        }
    }

    beta[(t_len - 1) * s_len + s_len - 1] = emit(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = emit(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in (0..s_len).rev() {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && ext[s] != BLANK && ext[s] != ext[s + 2] {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = acc + emit(t, s);
        }
    }

    let mut log_total = alpha[(t_len - 1) * s_len + s_len - 1];
    if s_len > 1 {
        log_total = log_add(log_total, alpha[(t_len - 1) * s_len + s_len - 2]);
    }
    Lattice { alpha, beta, log_total, t_len, s_len }
}

/// CTC loss −log P(labels | log_probs) with its analytic gradient.
///
/// `log_probs` is `[T, V]`; rows are expected to be log-softmax outputs, but
/// the loss and gradient are well-defined (and finite-difference-checkable)
/// for any real matrix. Infeasible label/frame combinations return a flagged
/// +∞ loss with a zero gradient instead of an error, so a training loop can
/// skip and log them.
pub fn ctc_loss<T: Scalar>(log_probs: &Tensor<T>, labels: &[usize]) -> Result<CtcOutcome<T>> {
    let (t_len, vocab) = validate_inputs(log_probs, labels)?;
    if t_len == 0 || !is_feasible(t_len, labels) {
        return Ok(CtcOutcome {
            loss: f64::INFINITY,
            grad: Tensor::zeros(log_probs.shape()),
            infeasible: true,
        });
    }
    let lp: Vec<f64> = log_probs.data().iter().map(|v| v.to_f64()).collect();
    let ext = extend_labels(labels);
    let lat = forward_backward(&lp, t_len, vocab, &ext);

    // d loss / d lp[t][k] = −Σ_{s: ext[s]=k} exp(α[t][s] + β[t][s] − lp[t][k] − log P)
    let mut grad = Tensor::zeros(log_probs.shape());
    {
        let g = grad.data_mut();
        for t in 0..lat.t_len {
            for (s, &k) in ext.iter().enumerate() {
                let a = lat.alpha[t * lat.s_len + s];
                let b = lat.beta[t * lat.s_len + s];
                if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                    continue;
                }
                let contrib = (a + b - lp[t * vocab + k] - lat.log_total).exp();
                g[t * vocab + k] = g[t * vocab + k] - T::from_f64(contrib);
            }
        }
    }
    Ok(CtcOutcome { loss: -lat.log_total, grad, infeasible: false })
}

/// Exhaustive path enumeration: sums the probability of every length-T path
/// whose collapse (merge repeats, then drop blanks) equals `labels`.
/// Intended as a test oracle; requires V^T ≤ 10⁶.
pub fn ctc_brute_force<T: Scalar>(log_probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (t_len, vocab) = validate_inputs(log_probs, labels)?;
    let paths = (vocab as f64).powi(t_len as i32);
    if paths > 1e6 {
        return Err(invalid(format!("{vocab}^{t_len} paths exceed the oracle budget")));
    }
    if t_len == 0 {
        return Ok(if labels.is_empty() { 0.0 } else { f64::INFINITY });
    }
    let lp: Vec<f64> = log_probs.data().iter().map(|v| v.to_f64()).collect();
    let mut total = 0.0f64;
    let mut path = vec![0usize; t_len];
    loop {
        // Collapse and compare lazily, walking the path once.
        let mut matches = true;
        let mut pos = 0;
        let mut prev = usize::MAX;
        for &p in &path {
            if p != prev && p != BLANK {
                if pos >= labels.len() || labels[pos] != p {
                    matches = false;
                    break;
                }
                pos += 1;
            }
            prev = p;
        }
        if matches && pos == labels.len() {
            let mut log_p = 0.0;
            for (t, &p) in path.iter().enumerate() {
                log_p += lp[t * vocab + p];
            }
            total += log_p.exp();
        }
        // Next path in base-V counting order.
        let mut carry = true;
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot < vocab {
                carry = false;
                break;
            }
            *slot = 0;
        }
        if carry {
            break;
        }
    }
    Ok(if total > 0.0 { -total.ln() } else { f64::INFINITY })
}

/// Per-frame argmax, merge adjacent repeats, strip blanks.
pub fn ctc_greedy_decode<T: Scalar>(log_probs: &Tensor<T>) -> Result<Vec<usize>> {
    let shape = log_probs.shape();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(invalid(format!("log_probs must be [T, V], got {shape:?}")));
    }
    let (t_len, vocab) = (shape[0], shape[1]);
    let data = log_probs.data();
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..t_len {
        let row = &data[t * vocab..(t + 1) * vocab];
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best != prev && best != BLANK {
            out.push(best);
        }
        prev = best;
    }
    Ok(out)
}

/// Prefix beam search maintaining per-prefix (ending-in-blank,
/// ending-in-non-blank) log-probability pairs. Hypotheses are ranked by
/// total log probability; ties break toward the lexicographically smaller
/// prefix so results are deterministic.
pub fn ctc_prefix_beam<T: Scalar>(
    log_probs: &Tensor<T>,
    beam_width: usize,
) -> Result<Vec<CtcHypothesis>> {
    let shape = log_probs.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(invalid(format!("log_probs must be [T, V] with V ≥ 2, got {shape:?}")));
    }
    if beam_width == 0 {
        return Err(invalid("beam_width must be ≥ 1"));
    }
    let (t_len, vocab) = (shape[0], shape[1]);
    let data = log_probs.data();
    let ninf = f64::NEG_INFINITY;

    // BTreeMap keyed by prefix: deterministic iteration, deterministic merge.
    let mut frontier: std::collections::BTreeMap<Vec<usize>, (f64, f64)> =
        std::collections::BTreeMap::new();
    frontier.insert(Vec::new(), (0.0, ninf));

    for t in 0..t_len {
        let row = &data[t * vocab..(t + 1) * vocab];
        let mut next: std::collections::BTreeMap<Vec<usize>, (f64, f64)> =
            std::collections::BTreeMap::new();
        for (prefix, &(p_b, p_nb)) in &frontier {
            let p_any = log_add(p_b, p_nb);
            for k in 0..vocab {
                let lp_k = row[k].to_f64();
                if k == BLANK {
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.0 = log_add(e.0, p_any + lp_k);
                } else if prefix.last() == Some(&k) {
                    // Same symbol again: continues the previous emission on
                    // the unchanged prefix...
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, p_nb + lp_k);
                    // ...or, after an intervening blank, starts a genuine
                    // repeat on the extended prefix.
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, p_b + lp_k);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, p_any + lp_k);
                }
            }
        }
        // Keep the top beam_width prefixes. BTreeMap iteration is already
        // lexicographic, so a stable sort by score leaves ties in
        // lexicographic order.
        let mut ranked: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            let sa = log_add(a.1 .0, a.1 .1);
            let sb = log_add(b.1 .0, b.1 .1);
            sb.partial_cmp(&sa).expect("scores are never NaN")
        });
        ranked.truncate(beam_width);
        frontier = ranked.into_iter().collect();
    }

    let mut out: Vec<CtcHypothesis> = frontier
        .into_iter()
        .map(|(labels, (p_b, p_nb))| CtcHypothesis { labels, log_prob: log_add(p_b, p_nb) })
        .collect();
    out.sort_by(|a, b| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .expect("scores are never NaN")
            .then_with(|| a.labels.cmp(&b.labels))
    });
    Ok(out)
}

/// CTC outcomes for a batch of independent utterances, computed in parallel
/// and returned in input order.
pub fn ctc_batch<T: Scalar>(
    items: &[(&Tensor<T>, &[usize])],
) -> Result<Vec<CtcOutcome<T>>> {
    let results = par::map_indexed(items.len(), |i| ctc_loss(items[i].0, items[i].1));
    results.into_iter().collect()
}
