//! RGB images in `[0, 1]` and PNG I/O for images and masks.

use std::path::Path;

use crate::error::{io_err, MdeError, Result};
use crate::types::Mask;

/// Planar RGB image, values in `[0, 1]`, layout `[3, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(MdeError::ShapeMismatch(format!("image {height}x{width} with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self { height, width, data }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let n = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let n = self.height * self.width;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * n + i] = v;
        }
    }

    pub fn clamped(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    pub fn mse(&self, other: &Self) -> f64 {
        let n = self.data.len() as f64;
        self.data.iter().zip(&other.data).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / n
    }

    /// 8-bit quantization as written to PNG.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for v in self.pixel(y, x) {
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * height * width {
            return Err(MdeError::ShapeMismatch("rgb8 buffer size".into()));
        }
        let mut img = Self::filled(height, width, [0.0; 3]);
        for (i, px) in bytes.chunks(3).enumerate() {
            img.set_pixel(i / width, i % width, [px[0] as f32 / 255.0, px[1] as f32 / 255.0, px[2] as f32 / 255.0]);
        }
        Ok(img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| MdeError::Image("buffer size".into()))?;
        buf.save(path).map_err(|e| MdeError::Image(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let img =
            image::load_from_memory(&bytes).map_err(|e| MdeError::Image(format!("{}: {e}", path.display())))?.to_rgb8();
        Self::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
    }
}

/// Writes a binary mask as 8-bit grayscale (0 / 255).
pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let bytes = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, bytes)
        .ok_or_else(|| MdeError::Image("mask size".into()))?;
    buf.save(path).map_err(|e| MdeError::Image(format!("{}: {e}", path.display())))
}

/// Reads a grayscale mask; pixels ≥ 128 are set.
pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let img =
        image::load_from_memory(&bytes).map_err(|e| MdeError::Image(format!("{}: {e}", path.display())))?.to_luma8();
    Mask::new(img.height() as usize, img.width() as usize, img.as_raw().iter().map(|&v| v >= 128).collect())
}

/// Writes a `[0, 1]` heat map as grayscale.
pub fn save_heatmap_png(values: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    let max = values.iter().copied().fold(0.0f32, f32::max).max(1e-12);
    let bytes = values.iter().map(|v| ((v / max).clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| MdeError::Image("heatmap size".into()))?;
    buf.save(path).map_err(|e| MdeError::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(4, 5, [1.0, 0.5, 0.0]);
        img.set_pixel(2, 3, [0.2, 0.4, 0.6]);
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());

        let m = Mask::from_fn(3, 4, |y, x| y == x);
        let mp = dir.path().join("m.png");
        save_mask_png(&m, &mp).unwrap();
        assert_eq!(load_mask_png(&mp).unwrap(), m);
    }
}
