use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Planar RGB image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Channel-major: all red, then green, then blue.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn l2_distance(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    /// Quantizes to 8 bits per channel and writes a PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.get(c, y as usize, x as usize).clamp(0.0, 1.0);
                px.0[c] = (v * 255.0).round() as u8;
            }
        }
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Round-trips through 8-bit quantization, as saving and reloading would.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
        }
    }
}

/// Stacks same-sized images into an (N, 3, H, W) tensor.
pub fn to_batch<T: Real>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape(format!(
                "mixed image sizes {}x{} and {h}x{w}",
                img.height, img.width
            )));
        }
        data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_matches_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(4, 5);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).fract();
        }
        let p = dir.path().join("a.png");
        img.save(&p).unwrap();
        assert_eq!(RgbImage::load(&p).unwrap(), img.quantized());
    }

    #[test]
    fn batch_rejects_mixed_sizes() {
        let a = RgbImage::new(4, 4);
        let b = RgbImage::new(8, 4);
        assert!(to_batch::<f32>(&[&a, &b]).is_err());
        assert_eq!(to_batch::<f32>(&[&a, &a]).unwrap().shape(), &[2, 3, 4, 4]);
    }
}
