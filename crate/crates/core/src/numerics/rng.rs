//! Deterministic random streams.
//!
//! All randomness in a run flows from one root seed. Substreams are derived
//! by hashing the root seed with a purpose tag and counters (step, op index,
//! utterance index), so any component can be re-derived in isolation and the
//! overall run does not depend on call order across components.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

/// FNV-1a over a sequence of u64 words. Stable, endian-independent.
fn fnv1a64(words: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn fnv1a64_str(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = seed ^ 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a substream seed from a root seed, a purpose tag, and counters.
pub fn derive_seed(root: u64, tag: &str, counters: &[u64]) -> u64 {
    let tagged = fnv1a64_str(root, tag);
    let mut words = Vec::with_capacity(counters.len() + 1);
    words.push(tagged);
    words.extend_from_slice(counters);
    fnv1a64(&words)
}

/// Seeded random stream with the handful of draws the crate needs.
pub struct Stream {
    rng: ChaCha12Rng,
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn from_seed(seed: u64) -> Self {
        Stream {
            rng: ChaCha12Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn derived(root: u64, tag: &str, counters: &[u64]) -> Self {
        Stream::from_seed(derive_seed(root, tag, counters))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u in (0,1] so ln is finite.
        let u = 1.0 - self.uniform();
        let v = self.uniform();
        let r = (-2.0 * u.ln()).sqrt();
        let theta = 2.0 * core::f64::consts::PI * v;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.rng.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from 0..n, in selection order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
