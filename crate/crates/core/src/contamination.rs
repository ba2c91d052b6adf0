//! Dust occlusion and air-bubble artifacts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{ImageTensor, Rng64, CHANNELS};
use crate::optics::{correlate_interleaved, disk_kernel, gaussian_kernel, ConvKernel};

/// Per-pixel occlusion opacity, 0 = untouched, 1 = fully occluded.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl OcclusionMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::arg("mask value outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            values: vec![v; height * width],
        })
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DustParams {
    pub count_min: u32,
    pub count_max: u32,
    /// Smudge side length as a fraction of the image side.
    pub smudge_min: f64,
    pub smudge_max: f64,
    pub line_width_min: u32,
    pub line_width_max: u32,
    pub max_opacity: f64,
    pub mask_blur_sigma: f64,
}

impl Default for DustParams {
    fn default() -> Self {
        Self {
            count_min: 3,
            count_max: 8,
            smudge_min: 0.08,
            smudge_max: 0.30,
            line_width_min: 1,
            line_width_max: 2,
            max_opacity: 0.6,
            mask_blur_sigma: 3.0,
        }
    }
}

impl DustParams {
    pub fn validate(&self) -> Result<()> {
        if self.count_min > self.count_max {
            return Err(Error::arg("dust count range is empty"));
        }
        if !(0.0 < self.smudge_min && self.smudge_min <= self.smudge_max && self.smudge_max <= 1.0) {
            return Err(Error::arg("dust smudge size range must satisfy 0 < min <= max <= 1"));
        }
        if self.line_width_min < 1 || self.line_width_min > self.line_width_max {
            return Err(Error::arg("dust line width range is empty"));
        }
        if !(self.max_opacity > 0.0 && self.max_opacity <= 1.0) {
            return Err(Error::arg("dust max_opacity must lie in (0, 1]"));
        }
        if !(self.mask_blur_sigma >= 0.0) {
            return Err(Error::arg("dust mask blur sigma must be >= 0"));
        }
        Ok(())
    }
}

fn blur_plane(plane: &[f32], height: usize, width: usize, kernel: &ConvKernel) -> Vec<f32> {
    correlate_interleaved(plane, height, width, 1, kernel)
}

/// Distance from point `p` to segment `a`-`b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Rectangular smudges with a top-to-bottom opacity ramp and thin constant
/// opacity lines, combined by maximum, Gaussian-blurred and clipped.
pub fn synth_dust_mask(height: usize, width: usize, params: &DustParams, rng: &mut Rng64) -> Result<OcclusionMask> {
    if height < 16 || width < 16 {
        return Err(Error::arg(format!(
            "dust needs an image of at least 16x16, got {height}x{width}"
        )));
    }
    params.validate()?;
    let mut mask = OcclusionMask::zeros(height, width);
    let n = rng.uniform_int(u64::from(params.count_min), u64::from(params.count_max))?;
    let max_op = params.max_opacity as f32;
    for _ in 0..n {
        if rng.next_f64() < 0.5 {
            let rw = ((rng.uniform(params.smudge_min, params.smudge_max)? * width as f64).round() as usize).max(1);
            let rh = ((rng.uniform(params.smudge_min, params.smudge_max)? * height as f64).round() as usize).max(1);
            let x0 = rng.uniform_int(0, (width - rw) as u64)? as usize;
            let y0 = rng.uniform_int(0, (height - rh) as u64)? as usize;
            for dy in 0..rh {
                let t = if rh > 1 { dy as f32 / (rh - 1) as f32 } else { 0.0 };
                let opacity = max_op * (1.0 - 0.8 * t);
                let row = &mut mask.values[(y0 + dy) * width..(y0 + dy + 1) * width];
                for v in &mut row[x0..x0 + rw] {
                    *v = v.max(opacity);
                }
            }
        } else {
            let line_w = rng.uniform_int(u64::from(params.line_width_min), u64::from(params.line_width_max))? as f64;
            let angle = rng.uniform(0.0, std::f64::consts::PI)?;
            let len = rng.uniform(0.2, 0.6)? * height.min(width) as f64;
            let cx = rng.uniform_int(0, width as u64 - 1)? as f64;
            let cy = rng.uniform_int(0, height as u64 - 1)? as f64;
            let (s, c) = angle.sin_cos();
            let a = (cx - 0.5 * len * c, cy - 0.5 * len * s);
            let b = (cx + 0.5 * len * c, cy + 0.5 * len * s);
            let reach = line_w / 2.0;
            let (xmin, xmax) = (a.0.min(b.0) - reach, a.0.max(b.0) + reach);
            let (ymin, ymax) = (a.1.min(b.1) - reach, a.1.max(b.1) + reach);
            let ys = (ymin.floor().max(0.0) as usize)..=(ymax.ceil().min(height as f64 - 1.0) as usize);
            for y in ys {
                let xs = (xmin.floor().max(0.0) as usize)..=(xmax.ceil().min(width as f64 - 1.0) as usize);
                for x in xs {
                    if segment_distance((x as f64, y as f64), a, b) <= reach {
                        let v = &mut mask.values[y * width + x];
                        *v = v.max(max_op);
                    }
                }
            }
        }
    }
    if params.mask_blur_sigma > 0.0 && n > 0 {
        let k = gaussian_kernel(params.mask_blur_sigma)?;
        mask.values = blur_plane(&mask.values, height, width, &k);
    }
    mask.values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(mask)
}

/// `x' = x * (1 - M)`, broadcast over channels.
pub fn apply_dust(image: &ImageTensor, mask: &OcclusionMask) -> Result<ImageTensor> {
    if mask.height != image.height() || mask.width != image.width() {
        return Err(Error::arg(format!(
            "dust mask {}x{} does not match image {}x{}",
            mask.height,
            mask.width,
            image.height(),
            image.width()
        )));
    }
    let data = image
        .data()
        .chunks_exact(CHANNELS)
        .zip(&mask.values)
        .flat_map(|(px, &m)| {
            let keep = 1.0 - m;
            [px[0] * keep, px[1] * keep, px[2] * keep]
        })
        .collect();
    Ok(ImageTensor::from_clamped(image.height(), image.width(), data))
}

pub fn dust(image: &ImageTensor, params: &DustParams, rng: &mut Rng64) -> Result<ImageTensor> {
    let mask = synth_dust_mask(image.height(), image.width(), params, rng)?;
    apply_dust(image, &mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BubbleParams {
    pub count_min: u32,
    pub count_max: u32,
    /// Radius as a fraction of the shorter image side.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Disk radius of the interior defocus blur; 0 disables it.
    pub blur_radius: usize,
    pub blur_alias: f64,
    /// Rim width as a fraction of the bubble radius.
    pub rim_width: f64,
    pub rim_alpha: f64,
    pub highlight_alpha: f64,
    pub highlight_sigma: f64,
}

impl Default for BubbleParams {
    fn default() -> Self {
        Self {
            count_min: 1,
            count_max: 3,
            radius_min: 0.10,
            radius_max: 0.25,
            blur_radius: 5,
            blur_alias: 0.5,
            rim_width: 0.08,
            rim_alpha: 0.35,
            highlight_alpha: 0.5,
            highlight_sigma: 2.0,
        }
    }
}

impl BubbleParams {
    /// Only the interior blur, which is the plain `(1 - B) x + B Blur(x)` blend.
    pub fn blur_only(self) -> Self {
        Self {
            rim_alpha: 0.0,
            highlight_alpha: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count_min > self.count_max {
            return Err(Error::arg("bubble count range is empty"));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max < 0.5) {
            return Err(Error::arg("bubble radius range must satisfy 0 < min <= max < 0.5"));
        }
        for (name, a) in [("rim_alpha", self.rim_alpha), ("highlight_alpha", self.highlight_alpha)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::arg(format!("bubble {name} must lie in [0, 1]")));
            }
        }
        if !(self.rim_width >= 0.0 && self.blur_alias >= 0.0 && self.highlight_sigma >= 0.0) {
            return Err(Error::arg("bubble widths and blur sigmas must be >= 0"));
        }
        Ok(())
    }
}

/// One sampled bubble: disk of `radius` around (`cy`, `cx`), pixel centers on integers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BubbleRegion {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

impl BubbleRegion {
    #[inline]
    pub fn distance(&self, y: usize, x: usize) -> f64 {
        ((y as f64 - self.cy).powi(2) + (x as f64 - self.cx).powi(2)).sqrt()
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.distance(y, x) <= self.radius
    }

    /// The binary mask `B`.
    pub fn mask(&self, height: usize, width: usize) -> Vec<bool> {
        (0..height * width)
            .map(|i| self.contains(i / width, i % width))
            .collect()
    }
}

/// Draws the bubble layout: count, then (cx, cy, radius) per bubble.
pub fn sample_bubbles(
    height: usize,
    width: usize,
    params: &BubbleParams,
    rng: &mut Rng64,
) -> Result<Vec<BubbleRegion>> {
    params.validate()?;
    let side = height.min(width) as f64;
    let n = rng.uniform_int(u64::from(params.count_min), u64::from(params.count_max))?;
    (0..n)
        .map(|_| {
            let cx = rng.uniform(0.0, width as f64)?;
            let cy = rng.uniform(0.0, height as f64)?;
            let radius = rng.uniform(params.radius_min, params.radius_max)? * side;
            Ok(BubbleRegion { cy, cx, radius })
        })
        .collect()
}

/// Composites the given bubbles onto `image` in order: interior blur, rim,
/// specular highlight. Only pixels inside a bubble disk are modified.
pub fn composite_bubbles(image: &ImageTensor, bubbles: &[BubbleRegion], params: &BubbleParams) -> Result<ImageTensor> {
    params.validate()?;
    let (h, w) = (image.height(), image.width());
    let mut data = image.data().to_vec();
    let blur = if params.blur_radius >= 1 {
        Some(disk_kernel(params.blur_radius, params.blur_alias)?)
    } else {
        None
    };
    let highlight_kernel = gaussian_kernel(params.highlight_sigma)?;
    for bubble in bubbles {
        let inside = bubble.mask(h, w);
        if let Some(k) = &blur {
            let blurred = blur_at(&data, h, w, k, &inside);
            for (i, px) in blurred {
                data[i * CHANNELS..(i + 1) * CHANNELS].copy_from_slice(&px);
            }
        }
        if params.rim_alpha > 0.0 {
            let inner = bubble.radius - params.rim_width * bubble.radius;
            let a = params.rim_alpha as f32;
            for (i, _) in inside.iter().enumerate().filter(|(_, &b)| b) {
                if bubble.distance(i / w, i % w) >= inner {
                    for v in &mut data[i * CHANNELS..(i + 1) * CHANNELS] {
                        *v += a * (1.0 - *v);
                    }
                }
            }
        }
        if params.highlight_alpha > 0.0 {
            let off = 0.4 * bubble.radius * std::f64::consts::FRAC_1_SQRT_2;
            let (ey, ex) = (bubble.cy - off, bubble.cx - off);
            let (ax, ay) = (0.3 * bubble.radius, 0.15 * bubble.radius);
            let ellipse: Vec<f32> = (0..h * w)
                .map(|i| {
                    let dy = (i / w) as f64 - ey;
                    let dx = (i % w) as f64 - ex;
                    if (dx / ax).powi(2) + (dy / ay).powi(2) <= 1.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let soft = blur_plane(&ellipse, h, w, &highlight_kernel);
            let a = params.highlight_alpha as f32;
            for (i, &s) in soft.iter().enumerate() {
                if inside[i] && s > 0.0 {
                    let alpha = (a * s).clamp(0.0, 1.0);
                    for v in &mut data[i * CHANNELS..(i + 1) * CHANNELS] {
                        *v += alpha * (1.0 - *v);
                    }
                }
            }
        }
    }
    Ok(ImageTensor::from_clamped(h, w, data))
}

/// Evaluates the correlation with `kernel` only at pixels flagged in `at`.
fn blur_at(src: &[f32], h: usize, w: usize, kernel: &ConvKernel, at: &[bool]) -> Vec<(usize, [f32; 3])> {
    let r = kernel.radius() as isize;
    let k = kernel.size();
    let reflect = |mut i: isize, n: usize| -> usize {
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
    };
    at.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            let mut acc = [0.0f64; 3];
            for ky in 0..k {
                let sy = reflect(y + ky as isize - r, h);
                for kx in 0..k {
                    let wgt = kernel.at(ky, kx);
                    if wgt == 0.0 {
                        continue;
                    }
                    let sx = reflect(x + kx as isize - r, w);
                    let j = (sy * w + sx) * CHANNELS;
                    for c in 0..3 {
                        acc[c] += wgt * f64::from(src[j + c]);
                    }
                }
            }
            (i, acc.map(|v| v as f32))
        })
        .collect()
}

pub fn apply_air_bubble(image: &ImageTensor, params: &BubbleParams, rng: &mut Rng64) -> Result<ImageTensor> {
    let bubbles = sample_bubbles(image.height(), image.width(), params, rng)?;
    composite_bubbles(image, &bubbles, params)
}
