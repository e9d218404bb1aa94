//! Single-image prediction shared by the `predict` command and the service.

use std::io::Cursor;

use image::{GrayImage, ImageBuffer, ImageFormat, Luma, Rgb32FImage};
use promptseg_core::conditioning::Prompt;
use promptseg_core::imaging::{quantize_probabilities, resize_rgb, BinaryMask};
use promptseg_core::model::SegmentationModel;
use promptseg_core::visual_prompts::CompositionRecipe;
use promptseg_core::Result;

/// Interpolation weight used when both a text and a support are given but
/// no `a` is.
pub const DEFAULT_MIX: f64 = 0.5;

pub type QuantizedMap = ImageBuffer<Luma<u16>, Vec<u16>>;

pub struct Support {
    pub image: Rgb32FImage,
    pub mask: BinaryMask,
    pub recipe: CompositionRecipe,
}

/// A prompt as it arrives from a user: either part may be missing, but not
/// both.
pub struct UserPrompt {
    pub text: Option<String>,
    pub support: Option<Support>,
    /// Visual weight when both are present.
    pub a: Option<f64>,
}

impl UserPrompt {
    pub fn is_empty(&self) -> bool {
        self.text.as_deref().map_or(true, |t| t.trim().is_empty()) && self.support.is_none()
    }
}

pub struct Prediction {
    /// Probabilities as `round(p * 65535)`.
    pub quantized: QuantizedMap,
    /// 0/255 mask obtained from `quantized`.
    pub mask: GrayImage,
    pub threshold: f64,
}

/// Foreground test applied to a quantized probability. Clients that
/// re-threshold the 16-bit map with the same rule get identical masks.
pub fn is_foreground(q: u16, t: f64) -> bool {
    q as f64 / 65535.0 >= t
}

pub fn threshold_quantized(map: &QuantizedMap, t: f64) -> GrayImage {
    GrayImage::from_fn(map.width(), map.height(), |x, y| {
        Luma([if is_foreground(map.get_pixel(x, y)[0], t) { 255 } else { 0 }])
    })
}

fn to_native(image: &Rgb32FImage, side: u32) -> Rgb32FImage {
    if image.dimensions() == (side, side) {
        image.clone()
    } else {
        resize_rgb(image, side, side)
    }
}

fn build_prompt(prompt: UserPrompt, side: u32) -> Result<Prompt> {
    let text = prompt.text.filter(|t| !t.trim().is_empty());
    let visual = prompt.support.map(|s| {
        (
            to_native(&s.image, side),
            s.mask.resize_nearest(side, side),
            s.recipe,
        )
    });
    match (text, visual) {
        (Some(text), None) => Ok(Prompt::Text(text)),
        (None, Some((image, mask, recipe))) => Ok(Prompt::Visual { image, mask, recipe }),
        (Some(text), Some((image, mask, recipe))) => Ok(Prompt::Mixed {
            text,
            image,
            mask,
            recipe,
            a: prompt.a.unwrap_or(DEFAULT_MIX),
        }),
        (None, None) => Err(promptseg_core::Error::Input("prompt missing".into())),
    }
}

/// Segment `image` at the backbone's native resolution and bring the
/// probabilities back to the input size.
pub fn predict(model: &SegmentationModel, image: &Rgb32FImage, prompt: UserPrompt, threshold: f64) -> Result<Prediction> {
    let side = model.backbone.config().native_size() as u32;
    let prompt = build_prompt(prompt, side)?;
    let input = to_native(image, side);
    let probs = model.segment_prompt(&input, &prompt)?.probabilities()?;
    let (w, h) = image.dimensions();
    let values = if (w, h) == (side, side) {
        probs.values
    } else {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(probs.width, probs.height, probs.values).expect("dimensions match");
        image::imageops::resize(&buf, w, h, image::imageops::FilterType::Triangle).into_raw()
    };
    let quantized = quantize_probabilities(w, h, &values);
    let mask = threshold_quantized(&quantized, threshold);
    Ok(Prediction {
        quantized,
        mask,
        threshold,
    })
}

pub fn png_bytes<P, C>(img: &ImageBuffer<P, C>) -> image::ImageResult<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rethresholding_the_quantized_map_reproduces_the_mask() {
        let values: Vec<f32> = (0..256).map(|i| i as f32 / 255.0).collect();
        let q = quantize_probabilities(16, 16, &values);
        for t in [0.1, 0.3, 0.5, 0.77, 0.9] {
            let mask = threshold_quantized(&q, t);
            let decoded = image::load_from_memory(&png_bytes(&q).unwrap()).unwrap().into_luma16();
            let again = threshold_quantized(&decoded, t);
            assert_eq!(mask, again);
        }
    }
}
