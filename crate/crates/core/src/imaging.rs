//! Image and mask primitives shared by every module.
//!
//! RGB images are `Rgb32FImage` with channel values in `[0, 1]`. Masks are
//! strictly binary and carry their own dimensions.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, Rgb32FImage};

use crate::error::{Error, Result};

/// Inclusive pixel bounds of a rectangular region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BoxRegion {
    pub left: u32,
    pub top: u32,
    pub right: u32,
    pub bottom: u32,
}

impl BoxRegion {
    pub fn width(&self) -> u32 {
        self.right - self.left + 1
    }

    pub fn height(&self) -> u32 {
        self.bottom - self.top + 1
    }

    /// Grow by `fraction` of the box size on every side, clipped to `width`x`height`.
    pub fn dilate(&self, fraction: f64, width: u32, height: u32) -> BoxRegion {
        let dx = (self.width() as f64 * fraction).round() as i64;
        let dy = (self.height() as f64 * fraction).round() as i64;
        BoxRegion {
            left: (self.left as i64 - dx).max(0) as u32,
            top: (self.top as i64 - dy).max(0) as u32,
            right: (self.right as i64 + dx).min(width as i64 - 1) as u32,
            bottom: (self.bottom as i64 + dy).min(height as i64 - 1) as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![true; (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_bools(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != (width * height) as usize {
            return Err(Error::input(format!(
                "mask data has {} entries, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Accepts `{0, 1}` or `{0, 255}` encodings; anything else is not binary.
    pub fn from_values(width: u32, height: u32, values: &[u8]) -> Result<Self> {
        if values.len() != (width * height) as usize {
            return Err(Error::input(format!(
                "mask has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        let max = values.iter().copied().max().unwrap_or(0);
        let on = if max <= 1 { 1 } else { 255 };
        let mut data = Vec::with_capacity(values.len());
        for &v in values {
            if v != 0 && v != on {
                return Err(Error::input(format!("mask is not binary (found value {v})")));
            }
            data.push(v == on);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_luma(img: &GrayImage) -> Result<Self> {
        Self::from_values(img.width(), img.height(), img.as_raw())
    }

    pub fn to_luma(&self) -> GrayImage {
        let raw = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        ImageBuffer::from_raw(self.width, self.height, raw).expect("dimensions match")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.data[(y * self.width + x) as usize] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn union(&self, other: &BinaryMask) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::input("mask union over different sizes"));
        }
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Tight bounding box of the foreground, `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<BoxRegion> {
        let mut bbox: Option<BoxRegion> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                bbox = Some(match bbox {
                    None => BoxRegion {
                        left: x,
                        top: y,
                        right: x,
                        bottom: y,
                    },
                    Some(b) => BoxRegion {
                        left: b.left.min(x),
                        top: b.top.min(y),
                        right: b.right.max(x),
                        bottom: b.bottom.max(y),
                    },
                });
            }
        }
        bbox
    }

    pub fn crop(&self, region: BoxRegion) -> Self {
        Self::from_fn(region.width(), region.height(), |x, y| {
            self.get(region.left + x, region.top + y)
        })
    }

    pub fn resize_nearest(&self, width: u32, height: u32) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        Self::from_fn(width, height, |x, y| {
            let sx = ((x as u64 * self.width as u64) / width as u64) as u32;
            let sy = ((y as u64 * self.height as u64) / height as u64) as u32;
            self.get(sx, sy)
        })
    }
}

pub fn load_rgb(path: &Path) -> Result<Rgb32FImage> {
    let img = image::open(path)?;
    Ok(img.to_rgb32f())
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?;
    BinaryMask::from_luma(&img.to_luma8())
}

pub fn save_rgb(img: &Rgb32FImage, path: &Path) -> Result<()> {
    to_rgb8(img).save(path)?;
    Ok(())
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    mask.to_luma().save(path)?;
    Ok(())
}

pub fn to_rgb8(img: &Rgb32FImage) -> image::RgbImage {
    ImageBuffer::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        Rgb(p.0.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn from_rgb8(img: &image::RgbImage) -> Rgb32FImage {
    image::DynamicImage::ImageRgb8(img.clone()).to_rgb32f()
}

pub fn decode_rgb(bytes: &[u8]) -> Result<Rgb32FImage> {
    Ok(image::load_from_memory(bytes)?.to_rgb32f())
}

pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    BinaryMask::from_luma(&image::load_from_memory(bytes)?.to_luma8())
}

/// Bilinear resize; identity when the size already matches.
pub fn resize_rgb(img: &Rgb32FImage, width: u32, height: u32) -> Rgb32FImage {
    if img.dimensions() == (width, height) {
        return img.clone();
    }
    image::imageops::resize(img, width, height, image::imageops::FilterType::Triangle)
}

pub fn crop_rgb(img: &Rgb32FImage, region: BoxRegion) -> Rgb32FImage {
    image::imageops::crop_imm(img, region.left, region.top, region.width(), region.height())
        .to_image()
}

/// Quantize a probability map to 16-bit grayscale (`round(p * 65535)`).
pub fn quantize_probabilities(width: u32, height: u32, probs: &[f32]) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let raw = probs
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect();
    ImageBuffer::from_raw(width, height, raw).expect("dimensions match")
}

pub fn dequantize(q: u16) -> f32 {
    (q as f64 / 65535.0) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_values_must_be_binary() {
        assert!(BinaryMask::from_values(2, 1, &[0, 255]).is_ok());
        assert!(BinaryMask::from_values(2, 1, &[0, 1]).is_ok());
        assert!(matches!(
            BinaryMask::from_values(2, 1, &[0, 128]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn bounding_box_matches_extent() {
        let m = BinaryMask::from_fn(8, 8, |x, y| (2..=5).contains(&x) && (1..=3).contains(&y));
        let b = m.bounding_box().unwrap();
        assert_eq!((b.left, b.top, b.right, b.bottom), (2, 1, 5, 3));
        assert!(BinaryMask::empty(4, 4).bounding_box().is_none());
    }

    #[test]
    fn dilate_is_clipped() {
        let b = BoxRegion {
            left: 0,
            top: 4,
            right: 3,
            bottom: 7,
        };
        let d = b.dilate(0.5, 10, 9);
        assert_eq!((d.left, d.top, d.right, d.bottom), (0, 2, 5, 8));
    }

    #[test]
    fn quantization_round_trip_is_within_one_step() {
        let probs = [0.0f32, 0.25, 0.5, 0.999_99, 1.0];
        let q = quantize_probabilities(5, 1, &probs);
        for (p, v) in probs.iter().zip(q.as_raw()) {
            assert!((dequantize(*v) - p).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }
}
