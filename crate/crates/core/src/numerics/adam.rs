//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use super::tape::GradStore;
use super::tensor::{Scalar, Tensor};

/// Adam hyperparameters. Defaults are the conventional (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment accumulators, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Scalar> {
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Iterate `(name, m, v)` in name order, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &Tensor<T>, &Tensor<T>)> {
        self.m
            .iter()
            .map(move |(k, m)| (k, m, self.v.get(k).expect("m and v share keys")))
    }

    /// Rebuild saved state, for checkpoint restore.
    pub fn restore(
        step: u64,
        m: BTreeMap<String, Tensor<T>>,
        v: BTreeMap<String, Tensor<T>>,
    ) -> Self {
        AdamState { step, m, v }
    }
}

/// One Adam update over every parameter accepted by `trainable`.
///
/// Parameters the predicate rejects are not read or written at all — neither
/// their values nor any moment state — so a frozen parameter stays
/// bit-identical across any number of steps.
pub fn adam_step<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &GradStore<T>,
    state: &mut AdamState<T>,
    hp: &AdamParams,
    lr: f64,
    trainable: impl Fn(&str) -> bool,
) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(hp.beta1);
    let b2 = T::from_f64(hp.beta2);
    let one_m_b1 = T::from_f64(1.0 - hp.beta1);
    let one_m_b2 = T::from_f64(1.0 - hp.beta2);
    let bc1 = T::from_f64(1.0 - hp.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - hp.beta2.powi(t));
    let eps = T::from_f64(hp.eps);
    let lr_t = T::from_f64(lr);

    for (name, p) in params.iter_mut() {
        if !trainable(name) {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + one_m_b1 * gi;
            vd[i] = b2 * vd[i] + one_m_b2 * gi * gi;
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] = pd[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Scale all gradients so their joint ℓ₂ norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut GradStore<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().to_f64();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut().iter_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    fn grads_for(value: &[f64]) -> GradStore<f64> {
        // Build a GradStore through the public tape API: loss = Σ g◦p.
        let mut tape: Tape<f64> = Tape::new(0, 0, false);
        let p = tape
            .param("p", &Tensor::zeros(&[value.len()]))
            .unwrap();
        let g = tape
            .constant(&Tensor::from_f64_slice(&[value.len()], value))
            .unwrap();
        let prod = tape.mul(p, g).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        // With zero-initialized moments, the first bias-corrected update is
        // lr · g/(|g| + ε·√(1/(1−β₂))) ≈ lr · sign(g).
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), Tensor::<f64>::zeros(&[2]));
        let grads = grads_for(&[0.3, -2.0]);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, &AdamParams::default(), 0.1, |_| true);
        let p = params.get("p").unwrap().data();
        assert!((p[0] + 0.1).abs() < 1e-4, "p[0] = {}", p[0]);
        assert!((p[1] - 0.1).abs() < 1e-4, "p[1] = {}", p[1]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), Tensor::<f64>::full(&[3], 0.7));
        let grads = grads_for(&[0.0, 0.0, 0.0]);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, &AdamParams::default(), 0.1, |_| true);
        assert_eq!(params.get("p").unwrap().data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), Tensor::<f64>::full(&[2], 0.25));
        params.insert("b".to_string(), Tensor::<f64>::full(&[2], 0.25));
        let mut tape: Tape<f64> = Tape::new(0, 0, false);
        let a = tape.param("a", params.get("a").unwrap()).unwrap();
        let b = tape.param("b", params.get("b").unwrap()).unwrap();
        let sa = tape.mul(a, a).unwrap();
        let sb = tape.mul(b, b).unwrap();
        let both = tape.add(sa, sb).unwrap();
        let loss = tape.sum(both).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, &AdamParams::default(), 0.02, |_| true);
        assert_eq!(
            params.get("a").unwrap().data(),
            params.get("b").unwrap().data()
        );
    }

    #[test]
    fn frozen_params_untouched() {
        let mut params = BTreeMap::new();
        params.insert("frozen.w".to_string(), Tensor::<f64>::full(&[2], 1.5));
        params.insert("live.w".to_string(), Tensor::<f64>::full(&[2], 1.5));
        let mut tape: Tape<f64> = Tape::new(0, 0, false);
        let a = tape.param("frozen.w", params.get("frozen.w").unwrap()).unwrap();
        let b = tape.param("live.w", params.get("live.w").unwrap()).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut state = AdamState::new();
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state, &AdamParams::default(), 0.05, |n| {
                !n.starts_with("frozen.")
            });
        }
        assert_eq!(params.get("frozen.w").unwrap().data(), &[1.5, 1.5]);
        assert_ne!(params.get("live.w").unwrap().data(), &[1.5, 1.5]);
        assert!(state.m.keys().all(|k| k.starts_with("live.")));
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize Σ (p − c)²; Adam should land near c.
        let c = [3.0, -1.0];
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), Tensor::<f64>::zeros(&[2]));
        let mut state = AdamState::new();
        for _ in 0..2000 {
            let p = params.get("p").unwrap().clone();
            let mut tape: Tape<f64> = Tape::new(0, 0, false);
            let pv = tape.param("p", &p).unwrap();
            let target = tape.constant(&Tensor::from_f64_slice(&[2], &c)).unwrap();
            let d = tape.sub(pv, target).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq).unwrap();
            let grads = tape.backward(loss).unwrap();
            adam_step(&mut params, &grads, &mut state, &AdamParams::default(), 0.01, |_| true);
        }
        let p = params.get("p").unwrap().data();
        assert!((p[0] - 3.0).abs() < 1e-2);
        assert!((p[1] + 1.0).abs() < 1e-2);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads = grads_for(&[0.6, 0.8]); // norm 1.0
        let norm = clip_global_norm(&mut grads, 5.0);
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(grads.get("p").unwrap().data(), &[0.6, 0.8]);
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let mut grads = grads_for(&[30.0, 40.0]); // norm 50
        let norm = clip_global_norm(&mut grads, 5.0);
        assert!((norm - 50.0).abs() < 1e-9);
        let g = grads.get("p").unwrap().data();
        assert!((g[0] - 3.0).abs() < 1e-12);
        assert!((g[1] - 4.0).abs() < 1e-12);
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);
    }
}
