//! Named corruptions, their default severities and the per-image dispatch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contamination::{apply_air_bubble, dust, BubbleParams, DustParams};
use crate::error::{Error, Result};
use crate::imagecore::{ImageTensor, Rng64, SeedPolicy};
use crate::optics::{defocus_blur, motion_blur};
use crate::photometric::{brightness, contrast, gaussian_noise, shot_noise};
use crate::stain::stain_jitter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    None,
    StainLight,
    StainHeavy,
    Dust,
    AirBubble,
    DefocusBlur,
    MotionBlur,
    GaussianNoise,
    ShotNoise,
    Brightness,
    Contrast,
}

impl CorruptionKind {
    /// The ten corruptions, in benchmark table order.
    pub const ALL: [CorruptionKind; 10] = [
        CorruptionKind::StainLight,
        CorruptionKind::StainHeavy,
        CorruptionKind::Dust,
        CorruptionKind::AirBubble,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::None => "none",
            CorruptionKind::StainLight => "stain-light",
            CorruptionKind::StainHeavy => "stain-heavy",
            CorruptionKind::Dust => "dust",
            CorruptionKind::AirBubble => "air-bubble",
            CorruptionKind::DefocusBlur => "defocus-blur",
            CorruptionKind::MotionBlur => "motion-blur",
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ShotNoise => "shot-noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }

    /// Parameter names accepted as overrides, with their defaults.
    pub fn default_params(self) -> BTreeMap<&'static str, f64> {
        let d = DustParams::default();
        let b = BubbleParams::default();
        let pairs: Vec<(&'static str, f64)> = match self {
            CorruptionKind::None => vec![],
            CorruptionKind::StainLight => vec![("theta", 0.05)],
            CorruptionKind::StainHeavy => vec![("theta", 0.2)],
            CorruptionKind::Dust => vec![
                ("count_min", f64::from(d.count_min)),
                ("count_max", f64::from(d.count_max)),
                ("smudge_min", d.smudge_min),
                ("smudge_max", d.smudge_max),
                ("line_width_min", f64::from(d.line_width_min)),
                ("line_width_max", f64::from(d.line_width_max)),
                ("max_opacity", d.max_opacity),
                ("mask_blur_sigma", d.mask_blur_sigma),
            ],
            CorruptionKind::AirBubble => vec![
                ("count_min", f64::from(b.count_min)),
                ("count_max", f64::from(b.count_max)),
                ("radius_min", b.radius_min),
                ("radius_max", b.radius_max),
                ("blur_radius", b.blur_radius as f64),
                ("blur_alias", b.blur_alias),
                ("rim_width", b.rim_width),
                ("rim_alpha", b.rim_alpha),
                ("highlight_alpha", b.highlight_alpha),
                ("highlight_sigma", b.highlight_sigma),
            ],
            CorruptionKind::DefocusBlur => vec![("radius", 10.0), ("alias_blur", 0.5)],
            CorruptionKind::MotionBlur => vec![("length", 20.0), ("sigma", 15.0)],
            CorruptionKind::GaussianNoise => vec![("sigma", 0.38)],
            CorruptionKind::ShotNoise => vec![("c", 3.0)],
            CorruptionKind::Brightness => vec![("delta", 0.5)],
            CorruptionKind::Contrast => vec![("factor", 0.05)],
        };
        pairs.into_iter().collect()
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(CorruptionKind::None)
            .chain(CorruptionKind::ALL)
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown corruption kind '{s}'")))
    }
}

/// A reproducible corruption recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub global_seed: u64,
}

/// Fully resolved parameters for one kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Resolved {
    None,
    Stain { theta: f64 },
    Dust(DustParams),
    AirBubble(BubbleParams),
    Defocus { radius: usize, alias_blur: f64 },
    Motion { length: usize, sigma: f64 },
    Gaussian { sigma: f64 },
    Shot { c: f64 },
    Brightness { delta: f64 },
    Contrast { factor: f64 },
}

fn as_count(name: &str, v: f64) -> Result<u32> {
    if v < 0.0 || v.fract() != 0.0 || v > f64::from(u32::MAX) {
        return Err(Error::validation(format!(
            "parameter '{name}' must be a non-negative integer, got {v}"
        )));
    }
    Ok(v as u32)
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, global_seed: u64) -> Self {
        Self {
            kind,
            params: BTreeMap::new(),
            global_seed,
        }
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    /// Merges overrides into the defaults and checks every precondition.
    pub fn resolve(&self) -> Result<Resolved> {
        let mut p = self.kind.default_params();
        for (name, &value) in &self.params {
            let slot = p.get_mut(name.as_str()).ok_or_else(|| {
                Error::validation(format!("unknown parameter '{name}' for corruption '{}'", self.kind))
            })?;
            if !value.is_finite() {
                return Err(Error::validation(format!("parameter '{name}' must be finite")));
            }
            *slot = value;
        }
        let get = |n: &str| p[n];
        let check = |ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::validation(format!("corruption '{}': {msg}", self.kind)))
            }
        };
        let resolved = match self.kind {
            CorruptionKind::None => Resolved::None,
            CorruptionKind::StainLight | CorruptionKind::StainHeavy => {
                check(get("theta") >= 0.0, "theta must be >= 0")?;
                Resolved::Stain { theta: get("theta") }
            }
            CorruptionKind::Dust => {
                let d = DustParams {
                    count_min: as_count("count_min", get("count_min"))?,
                    count_max: as_count("count_max", get("count_max"))?,
                    smudge_min: get("smudge_min"),
                    smudge_max: get("smudge_max"),
                    line_width_min: as_count("line_width_min", get("line_width_min"))?,
                    line_width_max: as_count("line_width_max", get("line_width_max"))?,
                    max_opacity: get("max_opacity"),
                    mask_blur_sigma: get("mask_blur_sigma"),
                };
                d.validate().map_err(|e| Error::validation(e.to_string()))?;
                Resolved::Dust(d)
            }
            CorruptionKind::AirBubble => {
                let b = BubbleParams {
                    count_min: as_count("count_min", get("count_min"))?,
                    count_max: as_count("count_max", get("count_max"))?,
                    radius_min: get("radius_min"),
                    radius_max: get("radius_max"),
                    blur_radius: as_count("blur_radius", get("blur_radius"))? as usize,
                    blur_alias: get("blur_alias"),
                    rim_width: get("rim_width"),
                    rim_alpha: get("rim_alpha"),
                    highlight_alpha: get("highlight_alpha"),
                    highlight_sigma: get("highlight_sigma"),
                };
                b.validate().map_err(|e| Error::validation(e.to_string()))?;
                Resolved::AirBubble(b)
            }
            CorruptionKind::DefocusBlur => {
                let radius = as_count("radius", get("radius"))? as usize;
                check(radius >= 1, "radius must be >= 1")?;
                check(get("alias_blur") >= 0.0, "alias_blur must be >= 0")?;
                Resolved::Defocus {
                    radius,
                    alias_blur: get("alias_blur"),
                }
            }
            CorruptionKind::MotionBlur => {
                let length = as_count("length", get("length"))? as usize;
                check(length >= 1, "length must be >= 1")?;
                check(get("sigma") > 0.0, "sigma must be > 0")?;
                Resolved::Motion {
                    length,
                    sigma: get("sigma"),
                }
            }
            CorruptionKind::GaussianNoise => {
                check(get("sigma") >= 0.0, "sigma must be >= 0")?;
                Resolved::Gaussian { sigma: get("sigma") }
            }
            CorruptionKind::ShotNoise => {
                check(get("c") > 0.0 && get("c") <= 100.0, "c must lie in (0, 100]")?;
                Resolved::Shot { c: get("c") }
            }
            CorruptionKind::Brightness => Resolved::Brightness { delta: get("delta") },
            CorruptionKind::Contrast => {
                check(get("factor") > 0.0, "factor must be > 0")?;
                Resolved::Contrast { factor: get("factor") }
            }
        };
        Ok(resolved)
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    /// Corrupts one image with the generator derived from `(global_seed, image_id)`.
    pub fn apply(&self, image: &ImageTensor, image_id: &str) -> Result<ImageTensor> {
        let mut rng = SeedPolicy::new(self.global_seed).rng_for(image_id);
        apply_resolved(&self.resolve()?, image, &mut rng)
    }
}

pub fn apply_resolved(resolved: &Resolved, image: &ImageTensor, rng: &mut Rng64) -> Result<ImageTensor> {
    match resolved {
        Resolved::None => Ok(image.clone()),
        Resolved::Stain { theta } => stain_jitter(image, *theta, rng),
        Resolved::Dust(p) => dust(image, p, rng),
        Resolved::AirBubble(p) => apply_air_bubble(image, p, rng),
        Resolved::Defocus { radius, alias_blur } => defocus_blur(image, *radius, *alias_blur),
        Resolved::Motion { length, sigma } => motion_blur(image, *length, *sigma, rng),
        Resolved::Gaussian { sigma } => gaussian_noise(image, *sigma, rng),
        Resolved::Shot { c } => shot_noise(image, *c, rng),
        Resolved::Brightness { delta } => Ok(brightness(image, *delta)),
        Resolved::Contrast { factor } => contrast(image, *factor),
    }
}

/// Parses `k=v` override strings as given on the command line.
pub fn parse_param_overrides<S: AsRef<str>>(items: &[S]) -> Result<BTreeMap<String, f64>> {
    items
        .iter()
        .map(|item| {
            let item = item.as_ref();
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("parameter override '{item}' is not k=v")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::validation(format!("parameter '{k}' has non-numeric value '{v}'")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in CorruptionKind::ALL {
            assert_eq!(k.name().parse::<CorruptionKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("fog".parse::<CorruptionKind>().is_err());
    }

    #[test]
    fn overrides_are_validated() {
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 1).with_param("sigma", 0.1);
        assert_eq!(spec.resolve().unwrap(), Resolved::Gaussian { sigma: 0.1 });
        let bad = CorruptionSpec::new(CorruptionKind::GaussianNoise, 1).with_param("theta", 0.1);
        assert!(bad
            .resolve()
            .unwrap_err()
            .to_string()
            .contains("unknown parameter 'theta'"));
        let bad = CorruptionSpec::new(CorruptionKind::Contrast, 1).with_param("factor", 0.0);
        assert!(bad.validate().is_err());
        let bad = CorruptionSpec::new(CorruptionKind::Dust, 1).with_param("count_min", 1.5);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn none_passes_through() {
        let img = ImageTensor::filled(4, 4, 0.3).unwrap();
        let out = CorruptionSpec::new(CorruptionKind::None, 0).apply(&img, "a").unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn parse_overrides() {
        let m = parse_param_overrides(&["sigma=0.2", " c = 3 "]).unwrap();
        assert_eq!(m["sigma"], 0.2);
        assert_eq!(m["c"], 3.0);
        assert!(parse_param_overrides(&["sigma"]).is_err());
        assert!(parse_param_overrides(&["sigma=x"]).is_err());
    }
}
