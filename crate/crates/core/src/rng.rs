//! Counter-based random substreams.
//!
//! Every stochastic entity in a scenario (a device's compute draws, the
//! channel's packet losses, a trace generator) owns its own stream, keyed by
//! `(root_seed, StreamId)`. Output `i` of a stream is a keyed bijective mix of
//! the counter `i`, so a stream's draws never depend on how many draws other
//! streams consumed, and replays are bit-identical on every platform.

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer; a bijection on `u64`.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Identifies one substream: scenario tag, entity index, purpose tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub scenario: &'static str,
    pub entity: u64,
    pub purpose: &'static str,
}

impl StreamId {
    pub const fn new(scenario: &'static str, entity: u64, purpose: &'static str) -> Self {
        Self {
            scenario,
            entity,
            purpose,
        }
    }
}

/// A reproducible random stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    k0: u64,
    k1: u64,
    counter: u64,
}

/// Derive the stream for `id` under `root_seed`.
pub fn derive_stream(root_seed: u64, id: StreamId) -> RngStream {
    RngStream::new(root_seed, id)
}

impl RngStream {
    pub fn new(root_seed: u64, id: StreamId) -> Self {
        let mut h = mix64(root_seed ^ 0x243F_6A88_85A3_08D3);
        h = mix64(h ^ fnv1a(id.scenario));
        h = mix64(h.wrapping_add(id.entity.wrapping_mul(GOLDEN)));
        h = mix64(h ^ fnv1a(id.purpose));
        let k0 = h;
        let k1 = mix64(h ^ 0x1319_8A2E_0370_7344) | 1;
        Self { k0, k1, counter: 0 }
    }

    /// Number of draws consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        let x = mix64(c.wrapping_mul(GOLDEN) ^ self.k0);
        mix64(x.wrapping_mul(self.k1) ^ (self.k0 >> 17))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`.
    #[inline]
    pub fn open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift with rejection of the biased zone.
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller (one output per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.open01();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in selection order.
    pub fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// Exponential draw with the given rate (per second).
    pub fn sample_exponential(&mut self, rate: f64) -> Result<f64> {
        let u = self.open01();
        exponential_from_uniform(u, rate)
    }

    pub fn sample_bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::param(format!("bernoulli p={p} outside [0,1]")));
        }
        Ok(self.next_f64() < p)
    }
}

/// Inverse-CDF transform `-ln(u)/rate` for `u` in `(0, 1)`.
pub fn exponential_from_uniform(u: f64, rate: f64) -> Result<f64> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::param(format!("exponential rate={rate} must be > 0")));
    }
    Ok(-u.ln() / rate)
}
