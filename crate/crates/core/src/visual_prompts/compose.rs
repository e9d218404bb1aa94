use image::{Rgb, Rgb32FImage};
use serde::{Deserialize, Serialize};

use super::recipe::{Color, CompositionRecipe, CompositionStep, CropContext};
use crate::error::{Error, Result};
use crate::imaging::{crop_rgb, resize_rgb, BinaryMask, BoxRegion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionConfig {
    /// Size of a cropped prompt image; `None` resizes back to the input size.
    pub output_size: Option<(u32, u32)>,
    /// Sigma for `bg_blur` steps without an explicit value.
    pub blur_sigma: f32,
    /// Per-side margin of `crop(large)` as a fraction of the object box.
    pub large_crop_margin: f64,
    /// Band width for `outline` steps without an explicit value.
    pub outline_width: u32,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            output_size: None,
            blur_sigma: 10.0,
            large_crop_margin: 0.5,
            outline_width: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComposedPrompt {
    pub image: Rgb32FImage,
    /// Region of the input kept by a crop step, before resizing.
    pub crop_box: Option<BoxRegion>,
    /// The mask carried through the steps (cropped and resized with the image).
    pub mask: BinaryMask,
}

/// Apply `recipe` to `(image, mask)`. Steps run in order; a crop also crops
/// the working mask so later steps see the object in its new frame.
pub fn compose_prompt(
    image: &Rgb32FImage,
    mask: &BinaryMask,
    recipe: &CompositionRecipe,
    cfg: &CompositionConfig,
) -> Result<ComposedPrompt> {
    if image.dimensions() != mask.dims() {
        return Err(Error::input(format!(
            "mask is {:?} but image is {:?}",
            mask.dims(),
            image.dimensions()
        )));
    }
    let mut img = image.clone();
    let mut m = mask.clone();
    let mut crop_box = None;
    for step in &recipe.steps {
        match *step {
            CompositionStep::None => {}
            CompositionStep::BgIntensity(alpha) => scale_background(&mut img, &m, alpha),
            CompositionStep::BgBlur(sigma) => {
                let blurred = image::imageops::blur(&img, sigma.unwrap_or(cfg.blur_sigma));
                for (x, y, p) in img.enumerate_pixels_mut() {
                    if !m.get(x, y) {
                        *p = *blurred.get_pixel(x, y);
                    }
                }
            }
            CompositionStep::Crop(context) => {
                let tight = m.bounding_box().ok_or_else(|| {
                    Error::DegenerateMask("crop needs a non-empty mask".into())
                })?;
                let region = match context {
                    CropContext::Tight => tight,
                    CropContext::Large => tight.dilate(cfg.large_crop_margin, img.width(), img.height()),
                };
                // Boxes compose when several crops are chained.
                crop_box = Some(match crop_box {
                    None => region,
                    Some(outer) => nest(outer, region, &img),
                });
                let (w, h) = cfg.output_size.unwrap_or(image.dimensions());
                img = resize_rgb(&crop_rgb(&img, region), w, h);
                m = m.crop(region).resize_nearest(w, h);
            }
            CompositionStep::Outline(color, width) => {
                let band = dilate(&m, width.unwrap_or(cfg.outline_width));
                for (x, y, p) in img.enumerate_pixels_mut() {
                    if band.get(x, y) && !m.get(x, y) {
                        *p = Rgb(color.0);
                    }
                }
            }
            CompositionStep::GrayscaleDye(color) => dye(&mut img, &m, color),
        }
    }
    Ok(ComposedPrompt {
        image: img,
        crop_box,
        mask: m,
    })
}

fn scale_background(img: &mut Rgb32FImage, mask: &BinaryMask, alpha: f32) {
    for (x, y, p) in img.enumerate_pixels_mut() {
        if !mask.get(x, y) {
            p.0 = p.0.map(|c| c * alpha);
        }
    }
}

fn dye(img: &mut Rgb32FImage, mask: &BinaryMask, color: Color) {
    for (x, y, p) in img.enumerate_pixels_mut() {
        let [r, g, b] = p.0;
        let gray = 0.299 * r + 0.587 * g + 0.114 * b;
        p.0 = if mask.get(x, y) {
            color.0.map(|c| gray * c)
        } else {
            [gray; 3]
        };
    }
}

/// Express a box found in an already cropped-and-resized frame in the
/// coordinates of the frame before it. Only the outermost box is exact;
/// nested crops are rare and rounded.
fn nest(outer: BoxRegion, inner: BoxRegion, frame: &Rgb32FImage) -> BoxRegion {
    let sx = outer.width() as f64 / frame.width() as f64;
    let sy = outer.height() as f64 / frame.height() as f64;
    BoxRegion {
        left: outer.left + (inner.left as f64 * sx).floor() as u32,
        top: outer.top + (inner.top as f64 * sy).floor() as u32,
        right: (outer.left + ((inner.right + 1) as f64 * sx).ceil() as u32 - 1).min(outer.right),
        bottom: (outer.top + ((inner.bottom + 1) as f64 * sy).ceil() as u32 - 1).min(outer.bottom),
    }
}

/// Chebyshev dilation by `radius` pixels (separable max filter).
fn dilate(mask: &BinaryMask, radius: u32) -> BinaryMask {
    let (w, h) = mask.dims();
    let r = radius as i64;
    let rows = BinaryMask::from_fn(w, h, |x, y| {
        let lo = (x as i64 - r).max(0) as u32;
        let hi = (x as i64 + r).min(w as i64 - 1) as u32;
        (lo..=hi).any(|xx| mask.get(xx, y))
    });
    BinaryMask::from_fn(w, h, |x, y| {
        let lo = (y as i64 - r).max(0) as u32;
        let hi = (y as i64 + r).min(h as i64 - 1) as u32;
        (lo..=hi).any(|yy| rows.get(x, yy))
    })
}
