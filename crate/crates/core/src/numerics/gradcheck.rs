//! Finite-difference gradient verification.
//!
//! The checker perturbs one parameter coordinate at a time, estimates the
//! derivative with central differences, and compares against the analytic
//! gradient under a relative-error metric that stays meaningful near zero:
//!
//! ```text
//! rel(a, n) = |a − n| / max(|a|, |n|, 1e-6)
//! ```
//!
//! Checks always run in f64; f32 rounding would drown the signal.

use std::collections::BTreeMap;

use super::rng::Stream;
use super::tape::GradStore;
use super::tensor::Tensor;
use super::Result;

/// Knobs for a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub h: f64,
    /// If set, check at most this many coordinates per parameter, selected
    /// by a seeded draw, instead of every coordinate.
    pub max_coords_per_param: Option<usize>,
    /// Seed for the coordinate subsample.
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts { h: 1e-5, max_coords_per_param: None, seed: 0 }
    }
}

/// The single worst coordinate found by a sweep.
#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstCoord>,
    pub per_param_max: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare the analytic gradient of `loss_fn` against central differences.
///
/// `loss_fn` is called once with `want_grad = true` to obtain the loss and
/// analytic gradients at `params`, then twice per checked coordinate with
/// `want_grad = false` on perturbed copies.
pub fn grad_check<F>(
    params: &BTreeMap<String, Tensor<f64>>,
    mut loss_fn: F,
    opts: &GradCheckOpts,
) -> Result<GradCheckReport>
where
    F: FnMut(&BTreeMap<String, Tensor<f64>>, bool) -> Result<(f64, Option<GradStore<f64>>)>,
{
    let (_, analytic) = loss_fn(params, true)?;
    let analytic = analytic.expect("loss_fn must return gradients when want_grad is true");

    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_err: 0.0,
        worst: None,
        per_param_max: BTreeMap::new(),
    };
    let mut work = params.clone();

    for (name, p) in params {
        let n = p.numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut s = Stream::derived(opts.seed, "gradcheck", &[hash_name(name)]);
                let mut idx = s.sample_indices(n, k);
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        let ga = analytic
            .get(name)
            .expect("analytic gradient missing a registered parameter");
        let mut param_max = 0.0f64;
        for &c in &coords {
            let orig = p.data()[c];
            work.get_mut(name).unwrap().data_mut()[c] = orig + opts.h;
            let (f_plus, _) = loss_fn(&work, false)?;
            work.get_mut(name).unwrap().data_mut()[c] = orig - opts.h;
            let (f_minus, _) = loss_fn(&work, false)?;
            work.get_mut(name).unwrap().data_mut()[c] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * opts.h);
            let a = ga.data()[c];
            let rel = relative_error(a, numeric);
            report.coords_checked += 1;
            param_max = param_max.max(rel);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstCoord {
                    param: name.clone(),
                    index: c,
                    analytic: a,
                    numeric,
                });
            }
        }
        report.per_param_max.insert(name.clone(), param_max);
    }
    Ok(report)
}

fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
