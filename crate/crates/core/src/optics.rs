//! Blur kernels and 2-D correlation with reflect-101 borders.

use crate::error::{Error, Result};
use crate::imagecore::{ImageTensor, Rng64, CHANNELS};
use crate::par;

const SUM_TOLERANCE: f64 = 1e-6;

/// Square, odd-sized, non-negative kernel whose weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    size: usize,
    weights: Vec<f64>,
}

impl ConvKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::arg(format!("kernel size must be odd, got {size}")));
        }
        if weights.len() != size * size {
            return Err(Error::arg("kernel weight count does not match size"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::arg("kernel weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::arg(format!("kernel weights sum to {sum}, not 1")));
        }
        Ok(Self { size, weights })
    }

    /// Normalizes a non-negative weight grid to unit sum.
    fn normalized(size: usize, mut weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::arg("kernel has no mass"));
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Self::new(size, weights)
    }

    pub fn identity() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let n = self.size;
        let weights = (0..n * n).map(|i| self.at(i % n, i / n)).collect();
        Self { size: n, weights }
    }
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

/// Gaussian-weighted line of `length` taps at `angle_deg` (counter-clockwise
/// from the +x axis, image rows growing downwards), bilinearly splatted onto a
/// square grid.
pub fn line_kernel(length: usize, sigma: f64, angle_deg: f64) -> Result<ConvKernel> {
    if length < 1 {
        return Err(Error::arg("line kernel length must be >= 1"));
    }
    if !(sigma > 0.0) {
        return Err(Error::arg(format!("line kernel sigma must be > 0, got {sigma}")));
    }
    let half = length / 2;
    let size = 2 * half + 1;
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (s, c) = (snap(s), snap(c));
    let center = half as f64;
    let mut grid = vec![0.0; size * size];
    for t in 0..length {
        let i = t as f64 - (length as f64 - 1.0) / 2.0;
        let w = (-i * i / (2.0 * sigma * sigma)).exp();
        let px = center + i * c;
        let py = center - i * s;
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                let share = w * wx * wy;
                if share <= 0.0 {
                    continue;
                }
                let (yy, xx) = (y0 as usize + dy, x0 as usize + dx);
                grid[yy * size + xx] += share;
            }
        }
    }
    ConvKernel::normalized(size, grid)
}

/// Isotropic Gaussian truncated at three standard deviations. `sigma == 0`
/// gives the identity.
pub fn gaussian_kernel(sigma: f64) -> Result<ConvKernel> {
    if !(sigma >= 0.0) {
        return Err(Error::arg(format!("gaussian sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(ConvKernel::identity());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let size = (2 * r + 1) as usize;
    let weights = (-r..=r)
        .flat_map(|y| (-r..=r).map(move |x| (y, x)))
        .map(|(y, x)| (-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    ConvKernel::normalized(size, weights)
}

/// Binary disk of `radius` on a `(2 radius + 1)` grid, anti-aliased by a
/// Gaussian of `alias_blur` (zero outside the grid) and renormalized.
pub fn disk_kernel(radius: usize, alias_blur: f64) -> Result<ConvKernel> {
    if radius < 1 {
        return Err(Error::arg("disk radius must be >= 1"));
    }
    if !(alias_blur >= 0.0) {
        return Err(Error::arg(format!("alias blur must be >= 0, got {alias_blur}")));
    }
    let size = 2 * radius + 1;
    let r = radius as isize;
    let r2 = r * r;
    let disk: Vec<f64> = (-r..=r)
        .flat_map(|y| (-r..=r).map(move |x| if x * x + y * y <= r2 { 1.0 } else { 0.0 }))
        .collect();
    if alias_blur == 0.0 {
        return ConvKernel::normalized(size, disk);
    }
    let g = gaussian_kernel(alias_blur)?;
    let gr = g.radius() as isize;
    let n = size as isize;
    let mut smoothed = vec![0.0; size * size];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for ky in -gr..=gr {
                for kx in -gr..=gr {
                    let (sy, sx) = (y + ky, x + kx);
                    if sy < 0 || sx < 0 || sy >= n || sx >= n {
                        continue;
                    }
                    acc += g.at((ky + gr) as usize, (kx + gr) as usize) * disk[(sy * n + sx) as usize];
                }
            }
            smoothed[(y * n + x) as usize] = acc;
        }
    }
    ConvKernel::normalized(size, smoothed)
}

/// Reflect-101 index (`dcb|abcd|cba`), repeated for offsets beyond one period.
#[inline]
fn reflect101(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Correlates each channel of an interleaved buffer with `kernel`. Works for
/// any image size; callers enforce size constraints.
pub(crate) fn correlate_interleaved(
    src: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    kernel: &ConvKernel,
) -> Vec<f32> {
    let r = kernel.radius() as isize;
    let k = kernel.size();
    let mut out = vec![0.0f32; src.len()];
    par::for_each_row(&mut out, width * channels, |y, row| {
        let mut acc = vec![0.0f64; channels];
        for x in 0..width {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ky in 0..k {
                let sy = reflect101(y as isize + ky as isize - r, height);
                let src_row = &src[sy * width * channels..(sy + 1) * width * channels];
                for kx in 0..k {
                    let w = kernel.at(ky, kx);
                    if w == 0.0 {
                        continue;
                    }
                    let sx = reflect101(x as isize + kx as isize - r, width);
                    let px = &src_row[sx * channels..(sx + 1) * channels];
                    for (a, &v) in acc.iter_mut().zip(px) {
                        *a += w * f64::from(v);
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                row[x * channels + c] = *a as f32;
            }
        }
    });
    out
}

/// Per-channel 2-D correlation with reflect-101 padding, clipped to `[0, 1]`.
pub fn convolve2d(image: &ImageTensor, kernel: &ConvKernel) -> Result<ImageTensor> {
    if kernel.size() > image.height().min(image.width()) {
        return Err(Error::arg(format!(
            "kernel of size {} exceeds image {}x{}",
            kernel.size(),
            image.height(),
            image.width()
        )));
    }
    let out = correlate_interleaved(image.data(), image.height(), image.width(), CHANNELS, kernel);
    Ok(ImageTensor::from_clamped(image.height(), image.width(), out))
}

/// Motion blur along a direction drawn once from `U(-45, 45)` degrees before
/// any pixel work.
pub fn motion_blur(image: &ImageTensor, length: usize, sigma: f64, rng: &mut Rng64) -> Result<ImageTensor> {
    let angle = rng.uniform(-45.0, 45.0)?;
    let kernel = line_kernel(length, sigma, angle)?;
    convolve2d(image, &kernel)
}

pub fn defocus_blur(image: &ImageTensor, radius: usize, alias_blur: f64) -> Result<ImageTensor> {
    convolve2d(image, &disk_kernel(radius, alias_blur)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = Rng64::new(seed);
        ImageTensor::from_fn(h, w, |_, _, _| rng.next_f64() as f32)
    }

    fn total_variation(img: &ImageTensor) -> f64 {
        let mut tv = 0.0;
        for y in 0..img.height() {
            for x in 0..img.width() {
                for c in 0..3 {
                    let v = f64::from(img.get(y, x, c));
                    if x + 1 < img.width() {
                        tv += (f64::from(img.get(y, x + 1, c)) - v).abs();
                    }
                    if y + 1 < img.height() {
                        tv += (f64::from(img.get(y + 1, x, c)) - v).abs();
                    }
                }
            }
        }
        tv
    }

    #[test]
    fn line_kernel_unit_length_is_identity() {
        let k = line_kernel(1, 3.0, 17.0).unwrap();
        assert_eq!(k, ConvKernel::identity());
        assert!(line_kernel(0, 1.0, 0.0).is_err());
        assert!(line_kernel(3, 0.0, 0.0).is_err());
    }

    #[test]
    fn line_kernel_geometry() {
        for angle in [-45.0, -30.0, 0.0, 12.5, 45.0, 90.0] {
            let k = line_kernel(20, 15.0, angle).unwrap();
            assert_eq!(k.size(), 21);
            assert!((k.sum() - 1.0).abs() < 1e-6);
            let (s, c) = f64::to_radians(angle).sin_cos();
            let h = k.radius() as f64;
            for row in 0..k.size() {
                for col in 0..k.size() {
                    if k.at(row, col) > 0.0 {
                        let (dx, dy) = (col as f64 - h, h - row as f64);
                        let across = (dx * s - dy * c).abs();
                        let along = (dx * c + dy * s).abs();
                        assert!(across < std::f64::consts::SQRT_2, "angle {angle}");
                        assert!(along <= 10.5);
                    }
                }
            }
        }
    }

    #[test]
    fn horizontal_and_vertical_lines_are_transposes() {
        let h = line_kernel(7, 2.0, 0.0).unwrap();
        let v = line_kernel(7, 2.0, 90.0).unwrap();
        assert_eq!(h.transpose(), v);
    }

    #[test]
    fn disk_radius_one_is_a_cross() {
        let k = disk_kernel(1, 0.0).unwrap();
        let expected = [0.0, 0.2, 0.0, 0.2, 0.2, 0.2, 0.0, 0.2, 0.0];
        for (a, b) in k.weights().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn anti_aliased_disk_is_symmetric() {
        let k = disk_kernel(10, 0.5).unwrap();
        assert_eq!(k.size(), 21);
        assert!((k.sum() - 1.0).abs() < 1e-6);
        let n = k.size();
        for r in 0..n {
            for c in 0..n {
                // 90 degree rotation: (r, c) -> (c, n-1-r)
                assert!((k.at(r, c) - k.at(c, n - 1 - r)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn convolution_identities() {
        let img = random_image(1, 9, 11);
        assert_eq!(convolve2d(&img, &ConvKernel::identity()).unwrap(), img);
        let flat = ImageTensor::filled(12, 12, 0.37).unwrap();
        let out = convolve2d(&flat, &disk_kernel(3, 0.5).unwrap()).unwrap();
        assert!(out.max_abs_diff(&flat) < 1e-6);
        assert!(convolve2d(&img, &disk_kernel(5, 0.0).unwrap()).is_err());
    }

    #[test]
    fn impulse_response_is_the_kernel() {
        let k = disk_kernel(2, 0.0).unwrap();
        let (h, w) = (15, 15);
        let img = ImageTensor::from_fn(h, w, |y, x, _| if (y, x) == (7, 7) { 1.0 } else { 0.0 });
        let out = convolve2d(&img, &k).unwrap();
        for dy in 0..5 {
            for dx in 0..5 {
                // correlation flips the kernel; the disk is symmetric
                let v = out.get(7 + dy - 2, 7 + dx - 2, 0);
                assert!((f64::from(v) - k.at(4 - dy, 4 - dx)).abs() < 1e-7);
            }
        }
        let mass: f64 = out.channel_plane(0).iter().map(|&v| f64::from(v)).sum();
        assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn defocus_impulse_has_diameter_21() {
        let img = ImageTensor::from_fn(41, 41, |y, x, _| if (y, x) == (20, 20) { 1.0 } else { 0.0 });
        let out = defocus_blur(&img, 10, 0.5).unwrap();
        let row: Vec<f32> = (0..41).map(|x| out.get(20, x, 1)).collect();
        let support: Vec<usize> = (0..41).filter(|&x| row[x] > 0.0).collect();
        assert_eq!(support.first(), Some(&10));
        assert_eq!(support.last(), Some(&30));
    }

    #[test]
    fn blur_stays_within_input_range_and_smooths() {
        let img = ImageTensor::from_fn(24, 24, |y, x, c| 0.2 + 0.5 * ((y * 7 + x * 3 + c) % 5) as f32 / 4.0);
        let once = defocus_blur(&img, 1, 0.0).unwrap();
        let twice = defocus_blur(&once, 1, 0.0).unwrap();
        assert!(once.data().iter().all(|&v| (0.2 - 1e-6..=0.7 + 1e-6).contains(&v)));
        assert!(total_variation(&once) <= total_variation(&img));
        assert!(total_variation(&twice) <= total_variation(&once));
    }

    #[test]
    fn motion_blur_properties() {
        let img = random_image(2, 32, 32);
        let mut rng = Rng64::new(1);
        assert_eq!(motion_blur(&img, 1, 15.0, &mut rng).unwrap(), img);
        let a = motion_blur(&img, 20, 15.0, &mut Rng64::new(9)).unwrap();
        let b = motion_blur(&img, 20, 15.0, &mut Rng64::new(9)).unwrap();
        assert_eq!(a, b);
        for seed in 0..50 {
            let theta = Rng64::new(seed).uniform(-45.0, 45.0).unwrap();
            assert!((-45.0..=45.0).contains(&theta));
        }
    }

    #[test]
    fn mean_is_preserved_on_constant_bordered_image() {
        let img = ImageTensor::from_fn(40, 40, |y, x, _| {
            if (8..32).contains(&y) && (8..32).contains(&x) {
                ((y * x) % 7) as f32 / 7.0
            } else {
                0.5
            }
        });
        let out = convolve2d(&img, &line_kernel(9, 3.0, 30.0).unwrap()).unwrap();
        assert!((out.mean() - img.mean()).abs() < 1e-5);
    }
}
