//! Seeded, counter-based randomness.
//!
//! The generator is ChaCha8 keyed by the 64-bit seed; independent substreams
//! use ChaCha's 64-bit stream word, so `(seed, stream)` fixes the output on
//! every platform regardless of evaluation order. Gaussian draws use the
//! Box–Muller transform on open-interval uniforms.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{FvitError, Result};
use crate::tensor::Tensor;

pub const ALGORITHM: &str = "chacha8-stream/box-muller";

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream addressed by `index`. Deriving the same
    /// index twice yields the same stream; the parent's position is ignored.
    pub fn substream(&self, index: u64) -> Rng {
        Rng::with_stream(self.seed, mix(self.stream ^ mix(index.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. `N(0, sigma²)` tensor. `sigma == 0` gives exact zeros.
pub fn gaussian_sample(rng: &mut Rng, shape: &[usize], sigma: f64) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(FvitError::param(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut t = Tensor::zeros(shape);
    if sigma > 0.0 {
        for v in t.data_mut() {
            *v = sigma * rng.standard_normal();
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_exactly_zero() {
        let mut rng = Rng::new(1);
        let t = gaussian_sample(&mut rng, &[3, 4], 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0 && v.is_sign_positive()));
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(gaussian_sample(&mut Rng::new(1), &[2], -0.1).is_err());
    }

    #[test]
    fn moments_match() {
        let mut rng = Rng::new(44);
        let t = gaussian_sample(&mut rng, &[1_000_000], 1.0).unwrap();
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");

        let mut rng = Rng::new(45);
        let t = gaussian_sample(&mut rng, &[1_000_000], 0.5).unwrap();
        let mean = t.sum() / t.len() as f64;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!((var - 0.25).abs() < 0.0025, "var {var}");
    }

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let root = Rng::new(44);
        let a: Vec<u64> = {
            let mut r = root.substream(3);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let mut scrambled = Rng::new(44);
        scrambled.next_u64();
        let b: Vec<u64> = {
            let mut r = scrambled.substream(3);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let mut other = root.substream(4);
        assert_ne!(a[0], other.next_u64());
    }

    #[test]
    fn gaussian_bits_reproducible() {
        let mut a = Rng::with_stream(44, 9);
        let mut b = Rng::with_stream(44, 9);
        let x = gaussian_sample(&mut a, &[257], 0.3).unwrap();
        let y = gaussian_sample(&mut b, &[257], 0.3).unwrap();
        let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}
