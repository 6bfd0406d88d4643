//! Procedural 10-class shape dataset at CIFAR scale (32×32 RGB).
//!
//! Every image is a flat shape over a textured two-colour gradient
//! background with pixel noise. Colours are low-saturation and the
//! shape/background luminance step is bounded, so local contrast is
//! comparable across images, as in natural photographs. Shape, colours,
//! position, scale and a small rotation are drawn per image from a stream
//! keyed by (seed, class, index), so any subset can be regenerated
//! independently.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::RgbImage;
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 10] = [
    "disk", "square", "triangle", "ring", "plus", "hbars", "vbars", "checker", "xcross", "pair",
];

pub const SIZE: usize = 32;

fn inside(class: usize, u: f64, v: f64) -> bool {
    let box1 = u.abs() < 1.0 && v.abs() < 1.0;
    match class {
        0 => u * u + v * v < 1.0,
        1 => u.abs() < 0.8 && v.abs() < 0.8,
        2 => v > -0.7 && v < 0.9 - 1.6 * u.abs(),
        3 => {
            let r = (u * u + v * v).sqrt();
            (0.55..1.0).contains(&r)
        }
        4 => (u.abs() < 0.3 && v.abs() < 1.0) || (v.abs() < 0.3 && u.abs() < 1.0),
        5 => box1 && ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
        6 => box1 && ((u + 1.0) * 2.5).floor() as i64 % 2 == 0,
        7 => box1 && (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 0,
        8 => box1 && ((u - v).abs() < 0.3 || (u + v).abs() < 0.3),
        9 => {
            let a = (u + 0.5).powi(2) + v * v < 0.16;
            let b = (u - 0.5).powi(2) + v * v < 0.16;
            a || b
        }
        _ => false,
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn item_rng(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    rng
}

fn tinted(rng: &mut ChaCha8Rng, grey: f64) -> [f64; 3] {
    let mut c = [0.0; 3];
    for v in c.iter_mut() {
        *v = (grey + rng.random_range(-TINT..TINT)).clamp(0.0, 1.0);
    }
    c
}

const TINT: f64 = 0.1;
const TEXTURE_AMPLITUDE: f64 = 0.08;

/// Image `index` of `class` for dataset `seed`.
pub fn generate_image(class: usize, seed: u64, index: usize) -> RgbImage {
    assert!(class < CLASS_NAMES.len());
    let mut rng = item_rng(seed, class, index);
    let grey_a = rng.random_range(0.25..0.75);
    let bg_a = tinted(&mut rng, grey_a);
    let grey_b = rng.random_range(0.25..0.75);
    let bg_b = tinted(&mut rng, grey_b);
    let bg_mean = luminance([
        (bg_a[0] + bg_b[0]) / 2.0,
        (bg_a[1] + bg_b[1]) / 2.0,
        (bg_a[2] + bg_b[2]) / 2.0,
    ]);
    // Foreground luminance sits a bounded step above or below the background.
    let step: f64 = rng.random_range(0.3..0.4);
    let up = if bg_mean + step > 0.95 {
        false
    } else if bg_mean - step < 0.05 {
        true
    } else {
        rng.random::<bool>()
    };
    let fg = tinted(&mut rng, if up { bg_mean + step } else { bg_mean - step });
    let grad_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (gs, gc) = grad_angle.sin_cos();
    let radius = rng.random_range(7.0..12.0);
    let cx = rng.random_range(radius * 0.9..SIZE as f64 - radius * 0.9);
    let cy = rng.random_range(radius * 0.9..SIZE as f64 - radius * 0.9);
    let rot: f64 = rng.random_range(-0.35..0.35);
    let (rs, rc) = rot.sin_cos();
    let noise = Normal::new(0.0, 0.03).unwrap();
    let gratings: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let freq: f64 = rng.random_range(0.5..1.6);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (theta.cos() * freq, theta.sin() * freq, phase)
        })
        .collect();

    let mut img = RgbImage::new(SIZE, SIZE);
    for y in 0..SIZE {
        for x in 0..SIZE {
            let t = 0.5 + 0.5 * (((x as f64 - 15.5) * gc + (y as f64 - 15.5) * gs) / 22.0);
            let mut cover = 0.0;
            for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = x as f64 + sx - cx;
                let dy = y as f64 + sy - cy;
                let u = (dx * rc + dy * rs) / radius;
                let v = (-dx * rs + dy * rc) / radius;
                if inside(class, u, v) {
                    cover += 0.25;
                }
            }
            let texture: f64 = gratings
                .iter()
                .map(|(fx, fy, ph)| TEXTURE_AMPLITUDE * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            for c in 0..3 {
                let bg = bg_a[c] * (1.0 - t) + bg_b[c] * t + texture;
                let v = bg * (1.0 - cover) + fg[c] * cover + noise.sample(&mut rng);
                img.set(c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// `per_class` images of every class, ordered by class then index.
pub fn generate(per_class: usize, seed: u64) -> Vec<(RgbImage, usize)> {
    (0..CLASS_NAMES.len())
        .flat_map(|c| (0..per_class).map(move |i| (generate_image(c, seed, i), c)))
        .collect()
}

/// Class subdirectory name for `class`, e.g. `03_ring`.
pub fn class_dir(class: usize) -> String {
    format!("{class:02}_{}", CLASS_NAMES[class])
}

/// Writes `per_class` PNGs per class under `root/<class_dir>/NNNNN.png`.
pub fn write_dataset(root: &Path, per_class: usize, seed: u64) -> Result<usize> {
    let mut n = 0;
    for c in 0..CLASS_NAMES.len() {
        let dir = root.join(class_dir(c));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            generate_image(c, seed, i).save(&dir.join(format!("{i:05}.png")))?;
            n += 1;
        }
    }
    Ok(n)
}
