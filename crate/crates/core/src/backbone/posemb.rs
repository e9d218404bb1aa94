//! Resampling of learned positional embeddings to a new token grid.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Name recorded in model metadata for the resampling kernel.
pub const INTERPOLATION_KERNEL: &str = "bilinear(align_corners=false)";

/// Side length `G` of the square patch grid encoded in a `(1 + G^2) x D` table.
pub fn trained_grid_side(rows: usize) -> Result<usize> {
    if rows < 2 {
        return Err(Error::input("positional table needs a CLS row and at least one patch"));
    }
    let patches = rows - 1;
    let g = (patches as f64).sqrt().round() as usize;
    if g * g != patches {
        return Err(Error::input(format!(
            "positional table has {patches} patch rows, not a square grid"
        )));
    }
    Ok(g)
}

/// Source sample positions and weights for one output axis (half-pixel centres).
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Resample `(1 + G^2) x D` positional embeddings to `(1 + g_h * g_w) x D`.
///
/// Row 0 (CLS) is copied unchanged. At the native grid the input is returned
/// as-is, so the identity is exact.
pub fn interpolate_positional_embeddings(trained: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (gh, gw) = target;
    if gh == 0 || gw == 0 {
        return Err(Error::input(format!("target grid {gh}x{gw} has a zero side")));
    }
    let (rows, dim) = trained.dims2()?;
    let g = trained_grid_side(rows)?;
    if (gh, gw) == (g, g) {
        return Ok(trained.clone());
    }
    let dtype = trained.dtype();
    let table: Vec<Vec<f64>> = trained.to_dtype(DType::F64)?.to_vec2()?;
    let ys = axis_taps(g, gh);
    let xs = axis_taps(g, gw);
    let mut out = Vec::with_capacity((1 + gh * gw) * dim);
    out.extend_from_slice(&table[0]);
    let at = |y: usize, x: usize| &table[1 + y * g + x];
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (a, b, c, d) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
            for k in 0..dim {
                let top = a[k] + (b[k] - a[k]) * fx;
                let bottom = c[k] + (d[k] - c[k]) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Ok(Tensor::from_vec(out, (1 + gh * gw, dim), trained.device())?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn table(g: usize, dim: usize) -> Tensor {
        let n = (1 + g * g) * dim;
        let v: Vec<f32> = (0..n).map(|i| ((i * 37 % 101) as f32) / 10.0 - 5.0).collect();
        Tensor::from_vec(v, (1 + g * g, dim), &Device::Cpu).unwrap()
    }

    #[test]
    fn native_grid_is_exact_identity() {
        let t = table(14, 8);
        let out = interpolate_positional_embeddings(&t, (14, 14)).unwrap();
        let diff = (out - &t).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn upsampled_grid_keeps_cls_row() {
        let t = table(14, 8);
        let out = interpolate_positional_embeddings(&t, (22, 22)).unwrap();
        assert_eq!(out.dims(), &[485, 8]);
        let cls_in: Vec<f32> = t.get(0).unwrap().to_vec1().unwrap();
        let cls_out: Vec<f32> = out.get(0).unwrap().to_vec1().unwrap();
        assert_eq!(cls_in, cls_out);
    }

    #[test]
    fn constant_table_stays_constant() {
        let t = Tensor::full(0.731f32, (1 + 14 * 14, 4), &Device::Cpu).unwrap();
        for target in [(22, 22), (7, 9), (1, 1), (30, 5)] {
            let out: Vec<Vec<f32>> = interpolate_positional_embeddings(&t, target)
                .unwrap()
                .to_vec2()
                .unwrap();
            for row in out {
                for v in row {
                    assert!((v - 0.731).abs() <= 1e-6, "{v}");
                }
            }
        }
    }

    #[test]
    fn zero_side_is_rejected() {
        let t = table(4, 2);
        assert!(matches!(
            interpolate_positional_embeddings(&t, (0, 3)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn downsample_of_linear_ramp_is_linear() {
        // A ramp along x is reproduced exactly by bilinear resampling away
        // from the clamped border.
        let g = 8;
        let mut v = vec![0.0f64];
        for _y in 0..g {
            for x in 0..g {
                v.push(x as f64);
            }
        }
        let t = Tensor::from_vec(v, (1 + g * g, 1), &Device::Cpu).unwrap();
        let out: Vec<Vec<f64>> = interpolate_positional_embeddings(&t, (4, 4))
            .unwrap()
            .to_vec2()
            .unwrap();
        // dst x maps to src 2x + 0.5
        for (i, row) in out.iter().skip(1).enumerate() {
            let x = i % 4;
            assert!((row[0] - (2.0 * x as f64 + 0.5)).abs() < 1e-12);
        }
    }
}
