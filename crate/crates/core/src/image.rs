//! Planar `f32` image buffers in display range `[0, 1]`.
//!
//! All pixel processing in this crate happens on these buffers; 8-bit
//! conversions only occur at file I/O boundaries and inside the compression
//! degradation stage.

use crate::error::{Error, Result};
use std::path::Path;

/// RGB image stored as three planes (`c * h * w`, row-major within a plane).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

/// Single-channel image (`h * w`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 3 * height * width] }
    }

    pub fn from_planes(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::ShapeMismatch(format!(
                "rgb buffer len {} != 3*{height}*{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for c in 0..3 {
            img.plane_mut(c).fill(rgb[c]);
        }
        img
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[c * self.height * self.width + y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn mean(&self) -> f32 {
        let sum: f64 = self.data.iter().map(|&v| v as f64).sum();
        (sum / self.data.len() as f64) as f32
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Zero-pad on the right to `target_width`. Fails if already wider.
    pub fn pad_right(&self, target_width: usize) -> Result<Self> {
        if self.width > target_width {
            return Err(Error::PadTooNarrow { width: self.width, target: target_width });
        }
        if self.width == target_width {
            return Ok(self.clone());
        }
        let mut out = Self::new(self.height, target_width);
        for c in 0..3 {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..self.height {
                let s = &src[y * self.width..(y + 1) * self.width];
                dst[y * target_width..y * target_width + self.width].copy_from_slice(s);
            }
        }
        Ok(out)
    }

    /// Crop columns `[x0, x0 + w)`; rows `[y0, y0 + h)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::ShapeMismatch(format!(
                "crop [{y0}+{h}, {x0}+{w}] exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Self::new(h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, y0 + y, x0 + x));
                }
            }
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [
                    unit_to_u8(self.get(0, y, x)),
                    unit_to_u8(self.get(1, y, x)),
                    unit_to_u8(self.get(2, y, x)),
                ];
                out.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        out
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    out.set(c, y, x, px.0[c] as f32 / 255.0);
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }
}

impl GrayImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "gray buffer len {} != {height}*{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// True iff every pixel is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = image::GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put_pixel(x as u32, y as u32, image::Luma([unit_to_u8(self.get(y, x))]));
            }
        }
        out.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(h, w);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, img.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0);
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn unit_to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_right_zero_fills_and_preserves() {
        let mut img = RgbImage::filled(2, 3, [0.5, 0.25, 1.0]);
        img.set(1, 1, 2, 0.75);
        let padded = img.pad_right(5).unwrap();
        assert_eq!(padded.width, 5);
        assert_eq!(padded.get(1, 1, 2), 0.75);
        assert_eq!(padded.get(0, 0, 0), 0.5);
        for c in 0..3 {
            for y in 0..2 {
                for x in 3..5 {
                    assert_eq!(padded.get(c, y, x), 0.0);
                }
            }
        }
    }

    #[test]
    fn pad_right_rejects_narrow_target() {
        let img = RgbImage::new(2, 8);
        assert!(matches!(img.pad_right(4), Err(Error::PadTooNarrow { .. })));
    }

    #[test]
    fn pad_identity_when_equal() {
        let img = RgbImage::filled(2, 4, [0.1, 0.2, 0.3]);
        let padded = img.pad_right(4).unwrap();
        assert_eq!(img, padded);
    }

    #[test]
    fn rgb8_round_trip_is_exact_on_8bit_values() {
        let mut img = RgbImage::new(3, 3);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 7) % 256) as f32 / 255.0;
        }
        let rt = RgbImage::from_rgb8(&img.to_rgb8());
        for (a, b) in img.data().iter().zip(rt.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
