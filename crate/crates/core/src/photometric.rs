//! Noise and illumination corruptions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{ImageTensor, Rng64};

/// Default severities for the four photometric corruptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub gauss_sigma: f64,
    pub shot_c: f64,
    pub contrast_f: f64,
    pub brightness_delta: f64,
}

impl Default for PhotometricParams {
    fn default() -> Self {
        Self {
            gauss_sigma: 0.38,
            shot_c: 3.0,
            contrast_f: 0.05,
            brightness_delta: 0.5,
        }
    }
}

fn map_samples(image: &ImageTensor, mut f: impl FnMut(f32) -> f64) -> ImageTensor {
    let data = image.data().iter().map(|&v| f(v) as f32).collect();
    ImageTensor::from_clamped(image.height(), image.width(), data)
}

/// `clip(x + sigma * n)`, one normal per sample in row-major, channel-innermost order.
pub fn gaussian_noise(image: &ImageTensor, sigma: f64, rng: &mut Rng64) -> Result<ImageTensor> {
    if !(sigma >= 0.0) {
        return Err(Error::arg(format!("gaussian sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    Ok(map_samples(image, |v| f64::from(v) + sigma * rng.gaussian()))
}

/// `clip(Poisson(x * c) / c)` per sample, same traversal as [`gaussian_noise`].
pub fn shot_noise(image: &ImageTensor, c: f64, rng: &mut Rng64) -> Result<ImageTensor> {
    if !(c > 0.0) {
        return Err(Error::arg(format!("shot noise factor must be > 0, got {c}")));
    }
    let mut out = Vec::with_capacity(image.data().len());
    for &v in image.data() {
        let k = rng.poisson(f64::from(v) * c)?;
        out.push((k as f64 / c) as f32);
    }
    Ok(ImageTensor::from_clamped(image.height(), image.width(), out))
}

/// Scales deviations from the global mean (all channels pooled) by `f`.
pub fn contrast(image: &ImageTensor, f: f64) -> Result<ImageTensor> {
    if !(f > 0.0) {
        return Err(Error::arg(format!("contrast factor must be > 0, got {f}")));
    }
    if f == 1.0 {
        return Ok(image.clone());
    }
    let mu = image.mean();
    Ok(map_samples(image, |v| (f64::from(v) - mu) * f + mu))
}

pub fn brightness(image: &ImageTensor, delta: f64) -> ImageTensor {
    map_samples(image, |v| f64::from(v) + delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> ImageTensor {
        ImageTensor::from_fn(8, 8, |y, x, c| ((y * 8 + x) * 3 + c) as f32 / 192.0)
    }

    fn dispersion(img: &ImageTensor) -> f64 {
        let mu = img.mean();
        img.data().iter().map(|&v| (f64::from(v) - mu).abs()).sum::<f64>() / img.data().len() as f64
    }

    #[test]
    fn zero_sigma_is_identity() {
        let x = ramp();
        assert_eq!(gaussian_noise(&x, 0.0, &mut Rng64::new(1)).unwrap(), x);
        assert!(gaussian_noise(&x, -1.0, &mut Rng64::new(1)).is_err());
    }

    #[test]
    fn noise_is_reproducible() {
        let x = ramp();
        let a = gaussian_noise(&x, 0.38, &mut Rng64::new(5)).unwrap();
        let b = gaussian_noise(&x, 0.38, &mut Rng64::new(5)).unwrap();
        assert_eq!(a, b);
        let a = shot_noise(&x, 3.0, &mut Rng64::new(5)).unwrap();
        let b = shot_noise(&x, 3.0, &mut Rng64::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shot_noise_of_black_is_black_and_on_grid() {
        let black = ImageTensor::filled(4, 4, 0.0).unwrap();
        assert_eq!(shot_noise(&black, 3.0, &mut Rng64::new(2)).unwrap(), black);
        let out = shot_noise(&ramp(), 3.0, &mut Rng64::new(2)).unwrap();
        for &v in out.data() {
            let k = (f64::from(v) * 3.0).round();
            assert!((f64::from(v) - k / 3.0).abs() < 1e-6 && k <= 3.0);
        }
        assert!(shot_noise(&black, 0.0, &mut Rng64::new(2)).is_err());
    }

    #[test]
    fn contrast_arithmetic() {
        let x = ramp();
        assert_eq!(contrast(&x, 1.0).unwrap(), x);
        let mu = x.mean();
        let y = contrast(&x, 0.05).unwrap();
        for (&a, &b) in x.data().iter().zip(y.data()) {
            let lhs = (f64::from(b) - mu).abs();
            let rhs = 0.05 * (f64::from(a) - mu).abs();
            assert!((lhs - rhs).abs() < 1e-6);
        }
        let flat = ImageTensor::filled(3, 3, 0.3).unwrap();
        assert!(contrast(&flat, 0.2).unwrap().max_abs_diff(&flat) < 1e-7);
    }

    #[test]
    fn contrast_is_monotone_in_factor() {
        let x = ramp();
        let mut prev = 0.0;
        for f in [0.05, 0.1, 0.3, 0.6, 1.0] {
            let d = dispersion(&contrast(&x, f).unwrap());
            assert!(d + 1e-9 >= prev);
            prev = d;
        }
    }

    #[test]
    fn brightness_cases() {
        let x = ImageTensor::filled(1, 1, 0.7).unwrap();
        assert_eq!(brightness(&x, 0.5).data(), &[1.0; 3]);
        let x = ImageTensor::filled(1, 1, 0.2).unwrap();
        assert!((brightness(&x, 0.5).data()[0] - 0.7).abs() < 1e-7);
        assert_eq!(brightness(&x, 0.0), x);
        let twice = brightness(&brightness(&x, 0.1), 0.2);
        assert!(twice.max_abs_diff(&brightness(&x, 0.3)) < 1e-6);
    }
}
