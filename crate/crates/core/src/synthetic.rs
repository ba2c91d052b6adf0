//! Procedural two-class texture dataset: fine checkerboards against smooth
//! blobs, both tinted with stain-like colours.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{ImageTensor, Rng64, SeedPolicy};
use crate::par;

pub const CHECKER: usize = 0;
pub const BLOB: usize = 1;
pub const CLASS_NAMES: [&str; 2] = ["checker", "blob"];

const HEMATOXYLIN: [f64; 3] = [0.42, 0.30, 0.62];
const EOSIN: [f64; 3] = [0.93, 0.62, 0.78];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureParams {
    pub size: usize,
    /// Checker cell side in pixels, inclusive range.
    pub cell_min: usize,
    pub cell_max: usize,
    pub blob_count_min: usize,
    pub blob_count_max: usize,
    /// Blob standard deviation as a fraction of the image side.
    pub blob_sigma_min: f64,
    pub blob_sigma_max: f64,
    /// Per-pixel Gaussian grain added to both classes.
    pub grain: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            size: 64,
            cell_min: 2,
            cell_max: 3,
            blob_count_min: 2,
            blob_count_max: 5,
            blob_sigma_min: 0.08,
            blob_sigma_max: 0.18,
            grain: 0.02,
        }
    }
}

impl TextureParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::arg("texture size must be >= 8"));
        }
        if self.cell_min == 0 || self.cell_min > self.cell_max {
            return Err(Error::arg("checker cell range must satisfy 1 <= min <= max"));
        }
        if self.blob_count_min == 0 || self.blob_count_min > self.blob_count_max {
            return Err(Error::arg("blob count range must satisfy 1 <= min <= max"));
        }
        if !(self.blob_sigma_min > 0.0 && self.blob_sigma_min <= self.blob_sigma_max) {
            return Err(Error::arg("blob sigma range must satisfy 0 < min <= max"));
        }
        if !(self.grain >= 0.0) {
            return Err(Error::arg("grain must be >= 0"));
        }
        Ok(())
    }
}

fn tint(mix: f64, shade: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = (HEMATOXYLIN[c] * mix + EOSIN[c] * (1.0 - mix)) * shade;
    }
    out
}

fn render(size: usize, rng: &mut Rng64, grain: f64, pattern: impl Fn(f64, f64) -> f64) -> ImageTensor {
    let shade = 0.9 + 0.1 * rng.next_f64();
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let rgb = tint(pattern(y as f64, x as f64), shade);
            for v in rgb {
                data.push((v + grain * rng.gaussian()) as f32);
            }
        }
    }
    ImageTensor::from_clamped(size, size, data)
}

/// A checkerboard with a random cell size, phase and contrast.
pub fn checker_texture(params: &TextureParams, rng: &mut Rng64) -> Result<ImageTensor> {
    params.validate()?;
    let cell = rng.uniform_int(params.cell_min as u64, params.cell_max as u64)? as f64;
    let (oy, ox) = (rng.uniform(0.0, cell)?, rng.uniform(0.0, cell)?);
    let contrast = rng.uniform(0.6, 1.0)?;
    Ok(render(params.size, rng, params.grain, |y, x| {
        let parity = (((y + oy) / cell).floor() + ((x + ox) / cell).floor()) as i64 % 2;
        0.5 + contrast * (parity as f64 - 0.5)
    }))
}

/// A few soft Gaussian blobs on a lighter background.
pub fn blob_texture(params: &TextureParams, rng: &mut Rng64) -> Result<ImageTensor> {
    params.validate()?;
    let n = rng.uniform_int(params.blob_count_min as u64, params.blob_count_max as u64)?;
    let size = params.size as f64;
    let blobs: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| -> Result<_> {
            let cy = rng.uniform(0.0, size)?;
            let cx = rng.uniform(0.0, size)?;
            let s = rng.uniform(params.blob_sigma_min, params.blob_sigma_max)? * size;
            Ok((cy, cx, s))
        })
        .collect::<Result<_>>()?;
    Ok(render(params.size, rng, params.grain, |y, x| {
        let v: f64 = blobs
            .iter()
            .map(|&(cy, cx, s)| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
            .sum();
        v.min(1.0)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub image: ImageTensor,
    pub label: usize,
}

/// `count` samples alternating between the classes, each drawn from the
/// per-image stream of `seed` and its id.
pub fn texture_dataset(count: usize, params: &TextureParams, seed: u64, prefix: &str) -> Result<Vec<SyntheticSample>> {
    params.validate()?;
    let policy = SeedPolicy::new(seed);
    par::map_range(count, |i| {
        let id = format!("{prefix}{i:05}");
        let mut rng = policy.rng_for(&id);
        let label = i % 2;
        let image = if label == CHECKER {
            checker_texture(params, &mut rng)?
        } else {
            blob_texture(params, &mut rng)?
        };
        Ok(SyntheticSample { id, image, label })
    })
    .into_iter()
    .collect()
}

pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total_variation(img: &ImageTensor) -> f64 {
        let (h, w) = (img.height(), img.width());
        let mut tv = 0.0;
        for y in 0..h {
            for x in 1..w {
                for c in 0..3 {
                    tv += f64::from((img.get(y, x, c) - img.get(y, x - 1, c)).abs());
                }
            }
        }
        tv / (h * (w - 1)) as f64
    }

    #[test]
    fn classes_alternate_and_are_deterministic() {
        let params = TextureParams::default();
        let a = texture_dataset(6, &params, 3, "t").unwrap();
        let b = texture_dataset(6, &params, 3, "t").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|s| s.label).collect::<Vec<_>>(), vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(a[0].image.height(), 64);
        assert_ne!(a[0].image, texture_dataset(1, &params, 4, "t").unwrap()[0].image);
    }

    #[test]
    fn checkers_are_rougher_than_blobs() {
        let params = TextureParams::default();
        for s in texture_dataset(20, &params, 9, "r").unwrap() {
            let tv = total_variation(&s.image);
            if s.label == CHECKER {
                assert!(tv > 0.1, "{} tv {tv}", s.id);
            } else {
                assert!(tv < 0.08, "{} tv {tv}", s.id);
            }
        }
    }

    #[test]
    fn rejects_bad_params() {
        let bad = TextureParams {
            cell_min: 0,
            ..Default::default()
        };
        assert!(texture_dataset(2, &bad, 0, "x").is_err());
    }
}
