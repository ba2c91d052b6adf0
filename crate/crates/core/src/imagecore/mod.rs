//! Image tensors, PNG/JPEG I/O and the deterministic random-number stack.

mod io;
mod rng;

pub use io::{load_image, quantize, save_image};
pub use rng::{fnv1a64, mix64, Rng64, SeedPolicy};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// An `H x W x 3` image with row-major, channel-innermost `f32` samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::arg(format!(
                "image data length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg(format!("image sample {i} = {} outside [0, 1]", data[i])));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image, clamping every sample into `[0, 1]`. Panics on NaN,
    /// which would indicate a kernel bug rather than bad input.
    pub(crate) fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * CHANNELS);
        for v in &mut data {
            assert!(!v.is_nan(), "NaN produced by image kernel");
            *v = v.clamp(0.0, 1.0);
        }
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    /// Evaluates `f(y, x, c)` for every sample; the result is clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Largest absolute per-sample difference.
    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Extracts channel `c` as a contiguous `H x W` plane.
    pub fn channel_plane(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(CHANNELS).copied().collect()
    }

    /// Interleaves three `H x W` planes, clamping to [0, 1].
    pub fn from_planes(height: usize, width: usize, planes: [Vec<f32>; 3]) -> Self {
        let mut data = vec![0.0; height * width * CHANNELS];
        for (c, plane) in planes.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                data[i * CHANNELS + c] = v;
            }
        }
        Self::from_clamped(height, width, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_length() {
        assert!(ImageTensor::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
        assert!(ImageTensor::new(2, 1, vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn planes_round_trip() {
        let img = ImageTensor::from_fn(3, 4, |y, x, c| (y * 4 + x) as f32 / 12.0 + c as f32 * 0.01);
        let planes = [img.channel_plane(0), img.channel_plane(1), img.channel_plane(2)];
        assert_eq!(ImageTensor::from_planes(3, 4, planes), img);
    }
}
