//! Restricting token interactions inside the vision tower to a masked region.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "layer")]
pub enum MaskMode {
    None,
    /// Only the CLS query row is restricted, at one layer.
    ClsOnlyLayer(usize),
    ClsOnlyAllLayers,
    /// Every query row is restricted, at every layer.
    AllTokensAllLayers,
}

/// Which tokens may attend to which, expressed over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaskPolicy {
    pub mode: MaskMode,
    /// Row-major `(g_h, g_w)` patch grid; `true` = inside the mask.
    grid: Vec<bool>,
    grid_dims: (usize, usize),
}

impl AttentionMaskPolicy {
    pub fn none() -> Self {
        Self {
            mode: MaskMode::None,
            grid: Vec::new(),
            grid_dims: (0, 0),
        }
    }

    pub fn new(mode: MaskMode, grid: Vec<bool>, grid_dims: (usize, usize)) -> Result<Self> {
        if grid.len() != grid_dims.0 * grid_dims.1 {
            return Err(Error::input("attention mask grid size mismatch"));
        }
        Ok(Self {
            mode,
            grid,
            grid_dims,
        })
    }

    /// A patch is inside the mask when any of its pixels is.
    pub fn from_pixel_mask(mode: MaskMode, mask: &BinaryMask, patch: usize) -> Result<Self> {
        let (w, h) = (mask.width() as usize, mask.height() as usize);
        if w % patch != 0 || h % patch != 0 {
            return Err(Error::Sizing {
                width: mask.width(),
                height: mask.height(),
                patch,
            });
        }
        let (gh, gw) = (h / patch, w / patch);
        let mut grid = vec![false; gh * gw];
        for y in 0..h {
            for x in 0..w {
                if mask.get(x as u32, y as u32) {
                    grid[(y / patch) * gw + x / patch] = true;
                }
            }
        }
        Self::new(mode, grid, (gh, gw))
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        self.grid_dims
    }

    pub fn is_none(&self) -> bool {
        self.mode == MaskMode::None
    }

    fn active_at(&self, layer: usize) -> bool {
        match self.mode {
            MaskMode::None => false,
            MaskMode::ClsOnlyLayer(k) => k == layer,
            MaskMode::ClsOnlyAllLayers | MaskMode::AllTokensAllLayers => true,
        }
    }

    pub(crate) fn validate(&self, grid: (usize, usize), num_layers: usize) -> Result<()> {
        if self.is_none() {
            return Ok(());
        }
        if self.grid_dims != grid {
            return Err(Error::input(format!(
                "attention mask grid {:?} does not match token grid {:?}",
                self.grid_dims, grid
            )));
        }
        if let MaskMode::ClsOnlyLayer(k) = self.mode {
            if k >= num_layers {
                return Err(Error::config(format!(
                    "attention mask layer {k} out of range for {num_layers} layers"
                )));
            }
        }
        if !self.grid.iter().any(|&b| b) {
            return Err(Error::DegenerateMask(
                "attention mask selects no patch; CLS would attend to nothing but itself".into(),
            ));
        }
        Ok(())
    }

    /// Additive `(T, T)` bias: 0 where attention is allowed, -inf elsewhere.
    fn bias_rows(&self) -> Vec<f64> {
        let t = 1 + self.grid.len();
        let allowed_col = |c: usize| c == 0 || self.grid[c - 1];
        let restrict_all = self.mode == MaskMode::AllTokensAllLayers;
        let mut bias = vec![0.0; t * t];
        for r in 0..t {
            if r != 0 && !restrict_all {
                continue;
            }
            for c in 0..t {
                if !allowed_col(c) {
                    bias[r * t + c] = f64::NEG_INFINITY;
                }
            }
        }
        bias
    }
}

/// Apply the policy to `(..., T, T)` pre-softmax scores of `layer`.
pub fn apply_attention_mask(policy: &AttentionMaskPolicy, layer: usize, scores: &Tensor) -> Result<Tensor> {
    if !policy.active_at(layer) || policy.grid.iter().all(|&b| b) {
        return Ok(scores.clone());
    }
    if !policy.grid.iter().any(|&b| b) {
        return Err(Error::DegenerateMask("attention mask selects no patch".into()));
    }
    let t = scores.dim(D::Minus1)?;
    if t != 1 + policy.grid.len() {
        return Err(Error::input(format!(
            "scores have {t} tokens, mask covers {}",
            1 + policy.grid.len()
        )));
    }
    let bias = Tensor::from_vec(policy.bias_rows(), (t, t), scores.device())?.to_dtype(scores.dtype())?;
    Ok(scores.broadcast_add(&bias)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scores(t: usize) -> Tensor {
        let v: Vec<f32> = (0..t * t).map(|i| (i % 7) as f32 - 3.0).collect();
        Tensor::from_vec(v, (1, 1, t, t), &Device::Cpu).unwrap()
    }

    fn half_mask() -> BinaryMask {
        // 4x4 pixels, patch 2 -> 2x2 grid; left column of patches in mask
        BinaryMask::from_fn(4, 4, |x, _| x < 2)
    }

    #[test]
    fn none_mode_is_passthrough() {
        let s = scores(5);
        let out = apply_attention_mask(&AttentionMaskPolicy::none(), 0, &s).unwrap();
        let a: Vec<f32> = out.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = s.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_mask_is_passthrough_in_every_mode() {
        let s = scores(5);
        let full = BinaryMask::full(4, 4);
        for mode in [
            MaskMode::ClsOnlyLayer(0),
            MaskMode::ClsOnlyAllLayers,
            MaskMode::AllTokensAllLayers,
        ] {
            let p = AttentionMaskPolicy::from_pixel_mask(mode, &full, 2).unwrap();
            let out = apply_attention_mask(&p, 0, &s).unwrap();
            let a: Vec<f32> = out.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = s.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cls_only_masks_out_of_mask_columns_of_cls_row() {
        let s = scores(5);
        let p = AttentionMaskPolicy::from_pixel_mask(MaskMode::ClsOnlyAllLayers, &half_mask(), 2).unwrap();
        let out: Vec<Vec<f32>> = apply_attention_mask(&p, 3, &s)
            .unwrap()
            .squeeze(0)
            .unwrap()
            .squeeze(0)
            .unwrap()
            .to_vec2()
            .unwrap();
        let orig: Vec<Vec<f32>> = s.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        // grid (row-major): patch0 in, patch1 out, patch2 in, patch3 out
        let inside = [true, true, false, true, false];
        for (c, &ok) in inside.iter().enumerate() {
            if ok {
                assert_eq!(out[0][c], orig[0][c]);
            } else {
                assert_eq!(out[0][c], f32::NEG_INFINITY);
            }
        }
        for r in 1..5 {
            assert_eq!(out[r], orig[r]);
        }
    }

    #[test]
    fn all_tokens_mode_restricts_every_row() {
        let s = scores(5);
        let p = AttentionMaskPolicy::from_pixel_mask(MaskMode::AllTokensAllLayers, &half_mask(), 2).unwrap();
        let out: Vec<Vec<f32>> = apply_attention_mask(&p, 0, &s)
            .unwrap()
            .squeeze(0)
            .unwrap()
            .squeeze(0)
            .unwrap()
            .to_vec2()
            .unwrap();
        for row in &out {
            assert_eq!(row[2], f32::NEG_INFINITY);
            assert_eq!(row[4], f32::NEG_INFINITY);
            assert!(row[0].is_finite() && row[1].is_finite() && row[3].is_finite());
        }
    }

    #[test]
    fn single_layer_mode_only_touches_that_layer() {
        let s = scores(5);
        let p = AttentionMaskPolicy::from_pixel_mask(MaskMode::ClsOnlyLayer(2), &half_mask(), 2).unwrap();
        let a: Vec<f32> = apply_attention_mask(&p, 1, &s).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = s.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let c: Vec<f32> = apply_attention_mask(&p, 2, &s).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_ne!(b, c);
    }

    #[test]
    fn empty_mask_is_degenerate() {
        let p = AttentionMaskPolicy::from_pixel_mask(MaskMode::ClsOnlyAllLayers, &BinaryMask::empty(4, 4), 2)
            .unwrap();
        assert!(matches!(
            apply_attention_mask(&p, 0, &scores(5)),
            Err(Error::DegenerateMask(_))
        ));
        assert!(matches!(p.validate((2, 2), 4), Err(Error::DegenerateMask(_))));
    }
}
