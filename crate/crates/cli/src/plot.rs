//! Static PNG plots: embedding scatter and per-channel sparsity bars.
//!
//! No text is rendered; colours follow set order in the accompanying JSON
//! report (`PALETTE[i]` for set `i`).

use std::path::Path;

use anyhow::Context;
use image::{Rgb, RgbImage};

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const MARGIN: u32 = 24;

fn colour(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

fn canvas(w: u32, h: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    for x in MARGIN..w - MARGIN {
        img.put_pixel(x, h - MARGIN, AXIS);
    }
    for y in MARGIN..=h - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> anyhow::Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// 2-D points coloured by `labels`, scaled to fill the plot area.
pub fn scatter(points: &[[f64; 2]], labels: &[usize], path: &Path) -> anyhow::Result<()> {
    let (w, h) = (480u32, 480u32);
    let mut img = canvas(w, h);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = |d: usize| if hi[d] > lo[d] { hi[d] - lo[d] } else { 1.0 };
    let inner = (w - 3 * MARGIN) as f64;
    for (p, &l) in points.iter().zip(labels) {
        let x = (2 * MARGIN) as f64 + (p[0] - lo[0]) / span(0) * inner;
        let y = (h - 2 * MARGIN) as f64 - (p[1] - lo[1]) / span(1) * inner;
        let (x, y) = (x.round() as i64, y.round() as i64);
        fill_rect(&mut img, x - 2, y - 2, x + 3, y + 3, colour(l));
    }
    save(&img, path)
}

/// Grouped bars on a [0, 1] axis: one group per channel, one bar per set.
pub fn sparsity_bars(per_set: &[Vec<f64>], path: &Path) -> anyhow::Result<()> {
    let channels = per_set.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let sets = per_set.len().max(1);
    let bar = 4u32;
    let group = bar * sets as u32 + 3;
    let w = (2 * MARGIN + group * channels as u32 + 4).max(160);
    let h = 300u32;
    let mut img = canvas(w, h);
    let base = (h - MARGIN) as i64;
    let height = (h - 2 * MARGIN) as f64;
    for (s, values) in per_set.iter().enumerate() {
        for (c, &v) in values.iter().enumerate() {
            let x0 = (MARGIN + 3 + c as u32 * group + s as u32 * bar) as i64;
            let top = base - (v.clamp(0.0, 1.0) * height).round() as i64;
            fill_rect(&mut img, x0, top, x0 + bar as i64, base, colour(s));
        }
    }
    save(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_deterministic_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let pts = [[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]];
        scatter(&pts, &[0, 1, 2], &dir.path().join("a.png")).unwrap();
        scatter(&pts, &[0, 1, 2], &dir.path().join("b.png")).unwrap();
        let a = std::fs::read(dir.path().join("a.png")).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b.png")).unwrap());
        assert_eq!(&a[1..4], b"PNG");

        sparsity_bars(&[vec![0.1, 0.9], vec![0.5, 1.0]], &dir.path().join("s.png")).unwrap();
        let img = image::open(dir.path().join("s.png")).unwrap().to_rgb8();
        assert_eq!(img.height(), 300);
    }

    #[test]
    fn degenerate_inputs_do_not_panic() {
        let dir = tempfile::tempdir().unwrap();
        scatter(&[[1.0, 1.0]], &[0], &dir.path().join("one.png")).unwrap();
        sparsity_bars(&[], &dir.path().join("none.png")).unwrap();
    }
}
