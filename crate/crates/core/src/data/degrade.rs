//! Deterministic synthetic corruptions at five severities.
//!
//! | severity | fog transmission | blur length | low-light gamma |
//! |---------:|-----------------:|------------:|----------------:|
//! | 1        | 0.85             | 3           | 1.5             |
//! | 2        | 0.70             | 5           | 2.0             |
//! | 3        | 0.55             | 9           | 2.5             |
//! | 4        | 0.40             | 15          | 3.0             |
//! | 5        | 0.25             | 21          | 3.5             |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use crate::error::{Error, Result};

pub const FOG_TRANSMISSION: [f32; 5] = [0.85, 0.70, 0.55, 0.40, 0.25];
pub const BLUR_LENGTH: [usize; 5] = [3, 5, 9, 15, 21];
pub const LOW_LIGHT_GAMMA: [f32; 5] = [1.5, 2.0, 2.5, 3.0, 3.5];
pub const FOG_AIRLIGHT: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Fog,
    MotionBlur,
    LowLight,
}

impl DegradationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::Fog => "fog",
            DegradationKind::MotionBlur => "motion_blur",
            DegradationKind::LowLight => "low_light",
        }
    }
}

impl std::str::FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fog" => Ok(Self::Fog),
            "motion_blur" | "motion-blur" | "blur" => Ok(Self::MotionBlur),
            "low_light" | "low-light" | "dark" => Ok(Self::LowLight),
            other => Err(Error::Config(format!("unknown degradation `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub severity: u8,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, severity: u8, seed: u64) -> Result<Self> {
        let s = Self { kind, severity, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::Config(format!(
                "severity must be in 1..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }

    /// Same corruption with a per-item seed mixed in, so images of one set
    /// draw different blur angles while staying reproducible.
    pub fn for_item(&self, item: u64) -> Self {
        let mut z = self.seed ^ item.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Self {
            seed: z ^ (z >> 31),
            ..*self
        }
    }

    /// Blur angle in radians, drawn once from the spec's seeded stream.
    pub fn blur_angle(&self) -> f64 {
        ChaCha8Rng::seed_from_u64(self.seed).random_range(0.0..std::f64::consts::PI)
    }
}

pub fn apply(image: &RgbImage, spec: &DegradationSpec) -> Result<RgbImage> {
    spec.validate()?;
    Ok(match spec.kind {
        DegradationKind::Fog => apply_fog(image, spec),
        DegradationKind::MotionBlur => apply_motion_blur(image, spec),
        DegradationKind::LowLight => apply_low_light(image, spec),
    })
}

/// `t·J + (1 − t)·A` with white airlight.
pub fn apply_fog(image: &RgbImage, spec: &DegradationSpec) -> RgbImage {
    debug_assert_eq!(spec.kind, DegradationKind::Fog);
    let t = FOG_TRANSMISSION[spec.level()];
    let haze = (1.0 - t) * FOG_AIRLIGHT;
    RgbImage {
        height: image.height,
        width: image.width,
        data: image
            .data
            .iter()
            .map(|&j| (t * j + haze).clamp(0.0, 1.0))
            .collect(),
    }
}

/// `in^γ`.
pub fn apply_low_light(image: &RgbImage, spec: &DegradationSpec) -> RgbImage {
    debug_assert_eq!(spec.kind, DegradationKind::LowLight);
    let gamma = LOW_LIGHT_GAMMA[spec.level()];
    RgbImage {
        height: image.height,
        width: image.width,
        data: image
            .data
            .iter()
            .map(|&v| v.clamp(0.0, 1.0).powf(gamma))
            .collect(),
    }
}

pub fn apply_motion_blur(image: &RgbImage, spec: &DegradationSpec) -> RgbImage {
    debug_assert_eq!(spec.kind, DegradationKind::MotionBlur);
    let kernel = MotionKernel::new(BLUR_LENGTH[spec.level()], spec.blur_angle());
    kernel.apply(image)
}

/// Normalized line kernel: `length` taps of weight `1/length` along a line
/// through the centre at `angle` (0 = horizontal), rasterized by rounding.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionKernel {
    /// (dy, dx, weight)
    pub taps: Vec<(isize, isize, f64)>,
}

impl MotionKernel {
    pub fn new(length: usize, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let w = 1.0 / length as f64;
        let half = (length as f64 - 1.0) / 2.0;
        let mut taps: Vec<(isize, isize, f64)> = Vec::new();
        for i in 0..length {
            let d = i as f64 - half;
            let dx = (d * c).round() as isize;
            let dy = (d * s).round() as isize;
            match taps.iter_mut().find(|t| t.0 == dy && t.1 == dx) {
                Some(t) => t.2 += w,
                None => taps.push((dy, dx, w)),
            }
        }
        Self { taps }
    }

    pub fn weight_sum(&self) -> f64 {
        self.taps.iter().map(|t| t.2).sum()
    }

    /// Correlates each channel with the kernel, reflect-padding borders.
    /// Accumulates in f64.
    pub fn apply(&self, image: &RgbImage) -> RgbImage {
        let (h, w) = (image.height, image.width);
        let mut out = RgbImage::new(h, w);
        for c in 0..3 {
            let src = image.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for &(dy, dx, k) in &self.taps {
                        let yy = reflect(y as isize + dy, h);
                        let xx = reflect(x as isize + dx, w);
                        acc += k * src[yy * w + xx] as f64;
                    }
                    dst[y * w + x] = (acc as f32).clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

/// Mirror index into `0..n` without repeating the edge sample
/// (`-1 → 1`, `n → n-2`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}
