use image::Rgb32FImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{crop_rgb, BinaryMask, BoxRegion};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    /// Crop side as a fraction of the image side, drawn from `[min_scale, max_scale]`.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Fraction of the object's pixels that must stay inside the window.
    pub min_visible: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            min_scale: 0.6,
            max_scale: 1.0,
            min_visible: 0.2,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_scale > 0.0
            && self.min_scale <= self.max_scale
            && self.max_scale <= 1.0
            && (0.0..=1.0).contains(&self.min_visible);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid crop config {self:?}")))
        }
    }
}

/// Summed-area table with a zero row and column in front.
struct Integral {
    w: usize,
    sums: Vec<u64>,
}

impl Integral {
    fn new(mask: &BinaryMask) -> Self {
        let (w, h) = (mask.width() as usize, mask.height() as usize);
        let mut sums = vec![0u64; (w + 1) * (h + 1)];
        let m = mask.as_slice();
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += m[y * w + x] as u64;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    /// Set pixels in the window with top-left `(x, y)` and size `cw`x`ch`.
    fn window(&self, x: usize, y: usize, cw: usize, ch: usize) -> u64 {
        let s = |xx: usize, yy: usize| self.sums[yy * (self.w + 1) + xx];
        s(x + cw, y + ch) + s(x, y) - s(x + cw, y) - s(x, y + ch)
    }
}

/// Window sized `cw`x`ch` centered on the object's bounding box, clipped to the image.
fn centered_on(mask: &BinaryMask, cw: u32, ch: u32) -> BoxRegion {
    let (w, h) = mask.dims();
    let b = mask.bounding_box().unwrap_or(BoxRegion {
        left: 0,
        top: 0,
        right: w - 1,
        bottom: h - 1,
    });
    let cx = (b.left + b.right) as i64 / 2;
    let cy = (b.top + b.bottom) as i64 / 2;
    let left = (cx - cw as i64 / 2).clamp(0, (w - cw) as i64) as u32;
    let top = (cy - ch as i64 / 2).clamp(0, (h - ch) as i64) as u32;
    BoxRegion {
        left,
        top,
        right: left + cw - 1,
        bottom: top + ch - 1,
    }
}

/// Pick a crop window for a sample. Positives only get windows keeping at
/// least `min_visible` of the object; among those the position is uniform.
/// When no window of the drawn size qualifies, the window is centered on the
/// object instead and a warning is logged.
pub fn choose_crop_window<R: Rng + ?Sized>(
    mask: &BinaryMask,
    negative: bool,
    cfg: &CropConfig,
    rng: &mut R,
) -> Result<BoxRegion> {
    cfg.validate()?;
    let (w, h) = mask.dims();
    if w == 0 || h == 0 {
        return Err(Error::input("cannot crop an empty image"));
    }
    let total = mask.count() as u64;
    if !negative && total == 0 {
        return Err(Error::DegenerateMask("positive sample with an empty mask".into()));
    }
    let scale = if cfg.min_scale == cfg.max_scale {
        cfg.min_scale
    } else {
        rng.gen_range(cfg.min_scale..=cfg.max_scale)
    };
    let cw = ((w as f64 * scale).round() as u32).clamp(1, w);
    let ch = ((h as f64 * scale).round() as u32).clamp(1, h);
    let (nx, ny) = ((w - cw + 1) as usize, (h - ch + 1) as usize);
    let region = |x: usize, y: usize| BoxRegion {
        left: x as u32,
        top: y as u32,
        right: x as u32 + cw - 1,
        bottom: y as u32 + ch - 1,
    };
    if negative {
        return Ok(region(rng.gen_range(0..nx), rng.gen_range(0..ny)));
    }
    let integral = Integral::new(mask);
    // visible / total >= min_visible, compared in integers up to the rounding of the bound
    let need = (cfg.min_visible * total as f64).ceil() as u64;
    let valid: Vec<(usize, usize)> = (0..ny)
        .flat_map(|y| (0..nx).map(move |x| (x, y)))
        .filter(|&(x, y)| integral.window(x, y, cw as usize, ch as usize) >= need)
        .collect();
    if valid.is_empty() {
        tracing::warn!(
            window = ?(cw, ch),
            object_pixels = total,
            "no crop keeps enough of the object; centering on it"
        );
        return Ok(centered_on(mask, cw, ch));
    }
    let (x, y) = valid[rng.gen_range(0..valid.len())];
    Ok(region(x, y))
}

/// Random crop of image and target that keeps the object partially visible.
pub fn object_aware_crop<R: Rng + ?Sized>(
    image: &Rgb32FImage,
    mask: &BinaryMask,
    negative: bool,
    cfg: &CropConfig,
    rng: &mut R,
) -> Result<(Rgb32FImage, BinaryMask)> {
    if image.dimensions() != mask.dims() {
        return Err(Error::input(format!(
            "image is {:?} but mask is {:?}",
            image.dimensions(),
            mask.dims()
        )));
    }
    let window = choose_crop_window(mask, negative, cfg, rng)?;
    if (window.width(), window.height()) == mask.dims() {
        return Ok((image.clone(), mask.clone()));
    }
    Ok((crop_rgb(image, window), mask.crop(window)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| (x0..=x1).contains(&x) && (y0..=y1).contains(&y))
    }

    #[test]
    fn full_window_is_identity() {
        let img = Rgb32FImage::from_fn(8, 6, |x, y| image::Rgb([x as f32 / 8.0, y as f32 / 6.0, 0.5]));
        let mask = blob(8, 6, 2, 2, 4, 4);
        let cfg = CropConfig {
            min_scale: 1.0,
            max_scale: 1.0,
            ..Default::default()
        };
        let (i, m) = object_aware_crop(&img, &mask, false, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(i, img);
        assert_eq!(m, mask);
    }

    #[test]
    fn random_crops_keep_a_fifth_of_the_object() {
        let mask = blob(40, 30, 30, 2, 39, 12);
        let total = mask.count();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = CropConfig {
            min_scale: 0.3,
            ..Default::default()
        };
        for _ in 0..1000 {
            let b = choose_crop_window(&mask, false, &cfg, &mut rng).unwrap();
            let kept = (b.top..=b.bottom)
                .flat_map(|y| (b.left..=b.right).map(move |x| (x, y)))
                .filter(|&(x, y)| mask.get(x, y))
                .count();
            assert!(kept * 5 >= total, "{b:?} kept {kept} of {total}");
        }
    }

    #[test]
    fn integral_matches_direct_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = BinaryMask::from_fn(13, 9, |_, _| rng.gen_bool(0.4));
        let ii = Integral::new(&mask);
        for (x, y, cw, ch) in [(0, 0, 13, 9), (2, 3, 5, 4), (12, 8, 1, 1), (4, 0, 9, 2)] {
            let direct = (y..y + ch)
                .flat_map(|yy| (x..x + cw).map(move |xx| (xx, yy)))
                .filter(|&(xx, yy)| mask.get(xx as u32, yy as u32))
                .count() as u64;
            assert_eq!(ii.window(x, y, cw, ch), direct);
        }
    }

    #[test]
    fn impossible_constraint_falls_back_to_centering() {
        // a thin object spanning the whole width: a 10% window cannot hold 20%
        let mask = blob(100, 100, 0, 50, 99, 50);
        let cfg = CropConfig {
            min_scale: 0.1,
            max_scale: 0.1,
            min_visible: 0.2,
        };
        let b = choose_crop_window(&mask, false, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((b.top..=b.bottom).contains(&50));
        assert_eq!(b.width(), 10);
    }

    #[test]
    fn positives_need_an_object() {
        let mask = BinaryMask::empty(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(choose_crop_window(&mask, false, &CropConfig::default(), &mut rng).is_err());
        assert!(choose_crop_window(&mask, true, &CropConfig::default(), &mut rng).is_ok());
    }
}
