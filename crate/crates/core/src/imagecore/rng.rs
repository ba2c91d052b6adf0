//! SplitMix64 and the fixed sampling recipes built on it.

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// SplitMix64 output mixer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Portable 64-bit generator. Single owner; never shared between images.
#[derive(Debug, Clone, PartialEq)]
pub struct Rng64 {
    state: u64,
    // Sine branch of the last Box-Muller pair, returned by the next call.
    spare_normal: Option<f64>,
}

impl Rng64 {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform double in `[0, 1)` from the top 53 bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// `lo + u * (hi - lo)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo <= hi) {
            return Err(Error::arg(format!("uniform: lo ({lo}) > hi ({hi})")));
        }
        let u = self.next_f64();
        Ok(lo + u * (hi - lo))
    }

    /// Uniform integer in the inclusive range `lo..=hi`, one draw.
    pub fn uniform_int(&mut self, lo: u64, hi: u64) -> Result<u64> {
        if lo > hi {
            return Err(Error::arg(format!("uniform_int: lo ({lo}) > hi ({hi})")));
        }
        let span = (hi - lo) as f64 + 1.0;
        let k = (self.next_f64() * span) as u64;
        Ok(lo + k.min(hi - lo))
    }

    /// Standard normal via Box-Muller; the cosine branch is returned first and
    /// the sine branch is kept for the following call.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.next_f64().max(TWO_POW_NEG_53);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * phi.sin());
        r * phi.cos()
    }

    /// Poisson sample by Knuth's multiplication method. Only small rates are
    /// supported (`lambda <= 100`).
    pub fn poisson(&mut self, lambda: f64) -> Result<u64> {
        if !(lambda >= 0.0) {
            return Err(Error::arg(format!("poisson: negative rate {lambda}")));
        }
        if lambda > 100.0 {
            return Err(Error::arg(format!("poisson: rate {lambda} exceeds 100")));
        }
        let limit = (-lambda).exp();
        let mut k = 0u64;
        let mut product = self.next_f64();
        while product >= limit {
            k += 1;
            product *= self.next_f64();
        }
        Ok(k)
    }
}

/// Derives an independent generator per image from one global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPolicy {
    pub global_seed: u64,
}

impl SeedPolicy {
    pub fn new(global_seed: u64) -> Self {
        Self { global_seed }
    }

    /// One SplitMix64 step from `global_seed ^ fnv1a64(image_id)`.
    pub fn image_seed(&self, image_id: &str) -> u64 {
        Rng64::new(self.global_seed ^ fnv1a64(image_id.as_bytes())).next_u64()
    }

    pub fn rng_for(&self, image_id: &str) -> Rng64 {
        Rng64::new(self.image_seed(image_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_vectors_seed_zero() {
        let mut rng = Rng64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn published_vectors_seed_1234567() {
        let mut rng = Rng64::new(1_234_567);
        let expected = [
            6_457_827_717_110_365_317u64,
            3_203_168_211_198_807_973,
            9_817_491_932_198_370_423,
            4_593_380_528_125_082_431,
            16_408_922_859_458_223_821,
        ];
        for e in expected {
            assert_eq!(rng.next_u64(), e);
        }
    }

    #[test]
    fn degenerate_interval() {
        let mut rng = Rng64::new(9);
        assert_eq!(rng.uniform(3.0, 3.0).unwrap(), 3.0);
        assert!(rng.uniform(1.0, 0.0).is_err());
    }

    #[test]
    fn first_uniform_of_seed_zero() {
        let mut rng = Rng64::new(0);
        let expected = (0xE220_A839_7B1D_CDAFu64 >> 11) as f64 / 9_007_199_254_740_992.0;
        assert_eq!(rng.uniform(0.0, 1.0).unwrap(), expected);
    }

    #[test]
    fn uniform_mean() {
        let mut rng = Rng64::new(123);
        let n = 100_000;
        let mean = (0..n).map(|_| rng.uniform(0.0, 1.0).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Rng64::new(77);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn gaussian_consumes_two_uniforms_per_pair() {
        let mut a = Rng64::new(5);
        let mut b = Rng64::new(5);
        a.gaussian();
        a.gaussian();
        b.next_u64();
        b.next_u64();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn poisson_moments_and_edge_cases() {
        let mut rng = Rng64::new(11);
        assert_eq!(rng.poisson(0.0).unwrap(), 0);
        assert!(rng.poisson(-1.0).is_err());
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.poisson(3.0).unwrap() as f64).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 3.0).abs() < 0.05, "mean {mean}");
        assert!((var - 3.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn determinism() {
        let mut a = Rng64::new(42);
        let mut b = Rng64::new(42);
        for _ in 0..100 {
            assert_eq!(a.gaussian().to_bits(), b.gaussian().to_bits());
            assert_eq!(a.poisson(2.5).unwrap(), b.poisson(2.5).unwrap());
        }
    }

    #[test]
    fn seed_policy() {
        let p = SeedPolicy::new(42);
        assert_eq!(p.image_seed("img-1"), p.image_seed("img-1"));
        assert_ne!(p.image_seed("img-1"), p.image_seed("img-2"));
        assert_ne!(p.image_seed("img-1"), SeedPolicy::new(43).image_seed("img-1"));
    }

    #[test]
    fn fnv_reference() {
        assert_eq!(fnv1a64(b""), 0xCBF2_9CE4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xAF63_DC4C_8601_EC8C);
    }
}
