//! Hematoxylin-Eosin-DAB color deconvolution and stain jitter.
//!
//! Optical density is taken per channel first (`od = -ln(max(v, 1e-6))`) and
//! then unmixed with the inverse stain matrix. Rows are pixels, so the
//! forward map is `s = od * M^-1` and the inverse is `od = s * M`.

use crate::error::Result;
use crate::imagecore::{ImageTensor, Rng64, CHANNELS};

/// Floor applied before taking the log of a transmitted-light fraction.
pub const OD_EPSILON: f64 = 1e-6;

/// Ruifrok-Johnston absorption vectors (H, E, DAB), before row normalization.
const RUIFROK_JOHNSTON: [[f64; 3]; 3] = [[0.650, 0.704, 0.286], [0.072, 0.990, 0.105], [0.268, 0.570, 0.776]];

/// Stain matrix with unit-norm rows and its precomputed inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HedMatrix {
    stain_vectors: [[f64; 3]; 3],
    inverse: [[f64; 3]; 3],
}

impl HedMatrix {
    pub fn ruifrok_johnston() -> Self {
        let mut m = RUIFROK_JOHNSTON;
        for row in &mut m {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self {
            stain_vectors: m,
            inverse: invert3(&m),
        }
    }

    pub fn stain_vectors(&self) -> &[[f64; 3]; 3] {
        &self.stain_vectors
    }

    pub fn inverse(&self) -> &[[f64; 3]; 3] {
        &self.inverse
    }
}

impl Default for HedMatrix {
    fn default() -> Self {
        Self::ruifrok_johnston()
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
    assert!(det.abs() > 1e-12, "singular stain matrix");
    let adj = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    adj.map(|row| row.map(|v| v / det))
}

#[inline]
fn row_times(v: [f64; 3], m: &[[f64; 3]; 3]) -> [f64; 3] {
    [0, 1, 2].map(|j| v[0] * m[0][j] + v[1] * m[1][j] + v[2] * m[2][j])
}

/// Per-pixel stain concentrations, channels ordered H, E, D. Unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct HedMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl HedMap {
    pub fn filled(height: usize, width: usize, s: [f64; 3]) -> Self {
        Self {
            height,
            width,
            data: s.repeat(height * width),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub fn rgb2hed(image: &ImageTensor, m: &HedMatrix) -> HedMap {
    let data = image
        .data()
        .chunks_exact(CHANNELS)
        .flat_map(|px| {
            let od = [0, 1, 2].map(|c| -f64::from(px[c]).max(OD_EPSILON).ln());
            row_times(od, &m.inverse)
        })
        .collect();
    HedMap {
        height: image.height(),
        width: image.width(),
        data,
    }
}

pub fn hed2rgb(hed: &HedMap, m: &HedMatrix) -> ImageTensor {
    let data = hed
        .data
        .chunks_exact(CHANNELS)
        .flat_map(|s| {
            let od = row_times([s[0], s[1], s[2]], &m.stain_vectors);
            od.map(|d| (-d).exp().clamp(0.0, 1.0) as f32)
        })
        .collect();
    ImageTensor::from_clamped(hed.height, hed.width, data)
}

/// Global min-max rescale onto `[0, 1]`; constant images are returned as is.
pub fn rescale_min_max(image: ImageTensor) -> ImageTensor {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return image;
    }
    let (h, w) = (image.height(), image.width());
    let span = hi - lo;
    let data = image.into_data().into_iter().map(|v| (v - lo) / span).collect();
    ImageTensor::from_clamped(h, w, data)
}

/// Per-stain affine jitter `s'_c = alpha_c * s_c + beta_c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainJitter {
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
}

impl StainJitter {
    pub const IDENTITY: StainJitter = StainJitter {
        alpha: [1.0; 3],
        beta: [0.0; 3],
    };

    /// Draws `alpha_c ~ U(1-theta, 1+theta)` then `beta_c ~ U(-theta, theta)`
    /// for c = H, E, D in that order (six uniforms, regardless of theta).
    pub fn sample(theta: f64, rng: &mut Rng64) -> Result<Self> {
        if !(theta >= 0.0) {
            return Err(crate::Error::arg(format!("stain theta must be >= 0, got {theta}")));
        }
        let mut j = Self::IDENTITY;
        for c in 0..3 {
            j.alpha[c] = rng.uniform(1.0 - theta, 1.0 + theta)?;
            j.beta[c] = rng.uniform(-theta, theta)?;
        }
        Ok(j)
    }

    pub fn apply(&self, hed: &mut HedMap) {
        for s in hed.data.chunks_exact_mut(CHANNELS) {
            for c in 0..3 {
                s[c] = self.alpha[c] * s[c] + self.beta[c];
            }
        }
    }
}

/// Full stain corruption: deconvolve, jitter, recompose, min-max rescale.
pub fn stain_jitter(image: &ImageTensor, theta: f64, rng: &mut Rng64) -> Result<ImageTensor> {
    let jitter = StainJitter::sample(theta, rng)?;
    Ok(apply_stain_jitter(image, &jitter, &HedMatrix::default()))
}

pub fn apply_stain_jitter(image: &ImageTensor, jitter: &StainJitter, m: &HedMatrix) -> ImageTensor {
    let mut hed = rgb2hed(image, m);
    jitter.apply(&mut hed);
    rescale_min_max(hed2rgb(&hed, m))
}
