//! Seeded, splittable randomness.
//!
//! [`RngState`] wraps a ChaCha8 stream cipher (counter based). Child streams
//! are derived with [`RngState::fork`] from the parent's *key* and a tag,
//! never from the parent's consumed position, so a run can hand every epoch,
//! batch or purpose its own stream and get the same numbers regardless of
//! the order in which streams are consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RngState {
    key: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        let key = splitmix64(seed);
        Self {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Independent child stream identified by `tag`.
    pub fn fork(&self, tag: u64) -> Self {
        let key = splitmix64(self.key ^ splitmix64(tag.wrapping_add(0xD1B5_4A32_D192_ED03)));
        Self {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Child stream for a (purpose, index) pair, e.g. (`SHUFFLE`, epoch).
    pub fn fork2(&self, tag: u64, index: u64) -> Self {
        self.fork(tag).fork(index)
    }

    /// One draw from U[0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// `n` draws from U[0, 1).
    pub fn uniform_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    /// One draw from U(0, 1], never zero.
    fn uniform_open_low(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// One Gamma(shape, 1) draw.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        Ok(self.ln_gamma_variate(shape)?.exp())
    }

    /// Natural log of one Gamma(shape, 1) draw. Working in log space keeps
    /// small-shape draws (which concentrate near zero) from underflowing.
    pub fn ln_gamma_variate(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(Error::Domain(format!("gamma shape must be > 0, got {shape}")));
        }
        if shape < 1.0 {
            // Gamma(a) = Gamma(a + 1) · U^(1/a)
            let g = self.marsaglia_tsang(shape + 1.0);
            let u = self.uniform_open_low();
            return Ok(g.ln() + u.ln() / shape);
        }
        Ok(self.marsaglia_tsang(shape).ln())
    }

    /// Marsaglia & Tsang (2000) squeeze/rejection sampler, valid for shape ≥ 1.
    fn marsaglia_tsang(&mut self, shape: f64) -> f64 {
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform_open_low();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return d * v;
            }
            if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_deterministic() {
        let mut a = RngState::new(42);
        assert!(a.uniform_vec(0).is_empty());
        let mut b = RngState::new(42);
        let mut a2 = RngState::new(42);
        assert_eq!(a2.uniform_vec(100), b.uniform_vec(100));
        let mut c = RngState::new(43);
        assert_ne!(a.uniform_vec(10), c.uniform_vec(10));
    }

    #[test]
    fn fork_ignores_parent_position() {
        let fresh = RngState::new(9);
        let mut used = RngState::new(9);
        used.uniform_vec(17);
        assert_eq!(fresh.fork(3).uniform_vec(8), used.fork(3).uniform_vec(8));
        assert_ne!(fresh.fork(3).uniform_vec(8), fresh.fork(4).uniform_vec(8));
        assert_ne!(fresh.fork2(1, 2).uniform_vec(4), fresh.fork2(2, 1).uniform_vec(4));
    }

    #[test]
    fn uniform_mean_within_three_sigma() {
        let n = 1_000_000;
        let mut rng = RngState::new(2024);
        let xs = rng.uniform_vec(n);
        assert!(xs.iter().all(|&x| (0.0..1.0).contains(&x)));
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sigma = 1.0 / (12.0 * n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "mean {mean}");
    }

    fn gamma_mean_check(shape: f64, seed: u64) {
        let n = 1_000_000;
        let mut rng = RngState::new(seed);
        let mut sum = 0.0;
        for _ in 0..n {
            let g = rng.gamma(shape).unwrap();
            assert!(g > 0.0);
            sum += g;
        }
        let mean = sum / n as f64;
        let se = (shape / n as f64).sqrt();
        assert!((mean - shape).abs() < 3.0 * se, "shape {shape}: mean {mean}");
    }

    #[test]
    fn gamma_mean_shape_two() {
        gamma_mean_check(2.0, 1);
    }

    #[test]
    fn gamma_mean_shape_fifth() {
        gamma_mean_check(0.2, 2);
    }

    #[test]
    fn gamma_rejects_bad_shape() {
        let mut rng = RngState::new(0);
        assert!(matches!(rng.gamma(0.0), Err(Error::Domain(_))));
        assert!(matches!(rng.gamma(-1.0), Err(Error::Domain(_))));
        assert!(rng.gamma(f64::NAN).is_err());
    }

    #[test]
    fn permutation_is_permutation() {
        let mut rng = RngState::new(5);
        let mut p = rng.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
