//! Frozen dual-encoder feature extractor.
//!
//! Parameters are plain tensors, never `Var`s, so no optimizer can reach
//! them. Layer indices are 0-based and a readout is the residual stream
//! after the indexed block.

mod attention_mask;
mod config;
mod posemb;
mod tokenizer;
mod towers;
pub mod weights;

use std::path::Path;

use candle_core::{Device, IndexOp, Tensor};
use image::Rgb32FImage;
use serde::{Deserialize, Serialize};

pub use attention_mask::{apply_attention_mask, AttentionMaskPolicy, MaskMode};
pub use config::{BackboneConfig, BackboneVariant, Precision};
pub use posemb::{interpolate_positional_embeddings, trained_grid_side, INTERPOLATION_KERNEL};
pub use tokenizer::{truncate, BpeTokenizer, HashTokenizer, TextTokenizer};

use crate::error::{Error, Result};
use towers::{pixel_tensor, TextTower, VisionTower};
use weights::ParamTable;

pub const READOUT_CONVENTION: &str = "post-block residual stream, 0-indexed layers";

/// Token matrices read out of the vision tower for a batch of images.
#[derive(Debug, Clone)]
pub struct ActivationReadout {
    /// One `(B, 1 + g_h*g_w, D_vis)` tensor per requested layer, CLS first.
    pub layers: Vec<Tensor>,
    /// Requested layer indices, in request order.
    pub layer_indices: Vec<usize>,
    /// `(B, D_emb)` joint-space image embedding.
    pub image_embedding: Tensor,
    pub grid: (usize, usize),
}

impl ActivationReadout {
    pub fn batch_size(&self) -> usize {
        self.image_embedding.dims()[0]
    }

    pub fn token_count(&self) -> usize {
        1 + self.grid.0 * self.grid.1
    }

    /// Readout restricted to the batch rows in `range`.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            layers: self
                .layers
                .iter()
                .map(|t| t.narrow(0, start, len))
                .collect::<candle_core::Result<_>>()?,
            layer_indices: self.layer_indices.clone(),
            image_embedding: self.image_embedding.narrow(0, start, len)?,
            grid: self.grid,
        })
    }

    /// Concatenate readouts of the same layers and grid along the batch.
    pub fn concat(parts: &[ActivationReadout]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::input("no readouts to concatenate"))?;
        if parts
            .iter()
            .any(|p| p.grid != first.grid || p.layer_indices != first.layer_indices)
        {
            return Err(Error::input("readouts differ in grid or layers"));
        }
        let layers = (0..first.layers.len())
            .map(|k| Tensor::cat(&parts.iter().map(|p| &p.layers[k]).collect::<Vec<_>>(), 0))
            .collect::<candle_core::Result<_>>()?;
        let emb = Tensor::cat(&parts.iter().map(|p| &p.image_embedding).collect::<Vec<_>>(), 0)?;
        Ok(Self {
            layers,
            layer_indices: first.layer_indices.clone(),
            image_embedding: emb,
            grid: first.grid,
        })
    }
}

/// Description written next to checkpoints so the backbone can be rebuilt
/// and verified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneMetadata {
    pub config: BackboneConfig,
    pub interpolation_kernel: String,
    pub readout_convention: String,
    pub parameter_count: usize,
    pub checksum: String,
}

#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamTable,
    vision: VisionTower,
    text: TextTower,
    tokenizer: Box<dyn TextTokenizer>,
    device: Device,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let params = match config.variant {
            BackboneVariant::PretrainedDualEncoder => {
                let path = config.weights.as_ref().expect("validated");
                weights::load(&config, path, &device)?
            }
            BackboneVariant::StandInRandom | BackboneVariant::ImagenetVitStandIn => {
                weights::stand_in(&config, &device)?
            }
        };
        Self::from_params(config, params)
    }

    /// Build from an explicit parameter table (must match the config geometry).
    pub fn from_params(config: BackboneConfig, params: ParamTable) -> Result<Self> {
        config.validate()?;
        let tokenizer: Box<dyn TextTokenizer> = match &config.tokenizer {
            Some(path) => Box::new(BpeTokenizer::from_file(path)?),
            None => Box::new(HashTokenizer::new(config.vocab_size)),
        };
        let vision = VisionTower::load(&params, config.patch_size, config.vision_layers, config.vision_heads)?;
        let text = TextTower::load(&params, config.text_layers, config.text_heads)?;
        Ok(Self {
            config,
            params,
            vision,
            text,
            tokenizer,
            device: Device::Cpu,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn checksum(&self) -> Result<String> {
        weights::checksum(&self.params)
    }

    pub fn metadata(&self) -> Result<BackboneMetadata> {
        Ok(BackboneMetadata {
            config: self.config.clone(),
            interpolation_kernel: INTERPOLATION_KERNEL.to_string(),
            readout_convention: READOUT_CONVENTION.to_string(),
            parameter_count: weights::parameter_count(&self.params),
            checksum: self.checksum()?,
        })
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        weights::save(&self.params, path)
    }

    fn check_image_size(&self, width: u32, height: u32) -> Result<()> {
        let p = self.config.patch_size;
        if width == 0 || height == 0 || width as usize % p != 0 || height as usize % p != 0 {
            return Err(Error::Sizing {
                width,
                height,
                patch: p,
            });
        }
        Ok(())
    }

    fn check_layers(&self, layers: &[usize]) -> Result<()> {
        let n = self.config.num_layers();
        match layers.iter().find(|&&l| l >= n) {
            Some(l) => Err(Error::config(format!(
                "readout layer {l} out of range for a {n}-layer backbone"
            ))),
            None => Ok(()),
        }
    }

    /// Encode one image, reading out `layers` (in the given order).
    pub fn encode_image(
        &self,
        image: &Rgb32FImage,
        layers: &[usize],
        policy: &AttentionMaskPolicy,
    ) -> Result<ActivationReadout> {
        self.encode_batch_with(&[image], layers, policy)
    }

    /// Encode a batch of equally sized images without attention masking.
    pub fn encode_batch(&self, images: &[&Rgb32FImage], layers: &[usize]) -> Result<ActivationReadout> {
        self.encode_batch_with(images, layers, &AttentionMaskPolicy::none())
    }

    fn encode_batch_with(
        &self,
        images: &[&Rgb32FImage],
        layers: &[usize],
        policy: &AttentionMaskPolicy,
    ) -> Result<ActivationReadout> {
        let first = images.first().ok_or_else(|| Error::input("empty image batch"))?;
        self.check_image_size(first.width(), first.height())?;
        self.check_layers(layers)?;
        let p = self.config.patch_size;
        let grid = (first.height() as usize / p, first.width() as usize / p);
        policy.validate(grid, self.config.num_layers())?;
        let pixels = pixel_tensor(images, self.config.precision.dtype(), &self.device)?;
        let out = self.vision.forward(&pixels, layers, policy)?;
        Ok(ActivationReadout {
            layers: out.readouts,
            layer_indices: layers.to_vec(),
            image_embedding: out.embedding,
            grid: out.grid,
        })
    }

    /// Joint-space embedding of an image (no readout).
    pub fn image_embedding(&self, image: &Rgb32FImage, policy: &AttentionMaskPolicy) -> Result<Tensor> {
        Ok(self.encode_image(image, &[], policy)?.image_embedding.i(0)?)
    }

    /// Joint-space embedding of a prompt. Over-length prompts are truncated
    /// to the context window with a warning.
    pub fn encode_text(&self, prompt: &str) -> Result<Tensor> {
        if prompt.trim().is_empty() {
            return Err(Error::input("empty text prompt"));
        }
        let ids = self.tokenizer.encode(prompt)?;
        let (ids, cut) = truncate(ids, self.config.context_length, self.tokenizer.end_token());
        if cut {
            tracing::warn!(
                prompt,
                context_length = self.config.context_length,
                "prompt truncated to the text context window"
            );
        }
        self.text.forward(&ids)
    }
}

/// Cosine similarity of two 1-D embeddings.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let a: Vec<f64> = a.to_dtype(candle_core::DType::F64)?.to_vec1()?;
    let b: Vec<f64> = b.to_dtype(candle_core::DType::F64)?.to_vec1()?;
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(dot / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn tiny() -> Backbone {
        Backbone::new(BackboneConfig::tiny(7)).unwrap()
    }

    fn test_image(w: u32, h: u32) -> Rgb32FImage {
        Rgb32FImage::from_fn(w, h, |x, y| Rgb([x as f32 / w as f32, y as f32 / h as f32, 0.5]))
    }

    #[test]
    fn readout_shapes_follow_grid() {
        let bb = tiny();
        let r = bb
            .encode_image(&test_image(48, 32), &[1, 3], &AttentionMaskPolicy::none())
            .unwrap();
        assert_eq!(r.grid, (8, 12));
        assert_eq!(r.layers.len(), 2);
        for t in &r.layers {
            assert_eq!(t.dims(), &[1, 1 + 8 * 12, 64]);
        }
        assert_eq!(r.image_embedding.dims(), &[1, 32]);
    }

    #[test]
    fn indivisible_size_is_a_sizing_error() {
        let bb = tiny();
        let err = bb
            .encode_image(&test_image(30, 32), &[0], &AttentionMaskPolicy::none())
            .unwrap_err();
        assert!(matches!(err, Error::Sizing { .. }));
    }

    #[test]
    fn out_of_range_layer_is_a_config_error() {
        let bb = tiny();
        let err = bb
            .encode_image(&test_image(32, 32), &[4], &AttentionMaskPolicy::none())
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn encoding_is_deterministic() {
        let bb = tiny();
        let img = test_image(32, 32);
        let a = bb.encode_image(&img, &[2], &AttentionMaskPolicy::none()).unwrap();
        let b = bb.encode_image(&img, &[2], &AttentionMaskPolicy::none()).unwrap();
        let va: Vec<f32> = a.layers[0].flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = b.layers[0].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        assert_eq!(tiny().checksum().unwrap(), bb.checksum().unwrap());
    }

    #[test]
    fn text_embedding_properties() {
        let bb = tiny();
        let a = bb.encode_text("dog").unwrap();
        assert_eq!(a.dims(), &[32]);
        let b = bb.encode_text("dog").unwrap();
        assert_eq!(a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());
        assert!((cosine(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = bb.encode_text("a photo of a dog").unwrap();
        assert_ne!(a.to_vec1::<f32>().unwrap(), c.to_vec1::<f32>().unwrap());
        assert!(matches!(bb.encode_text("  "), Err(Error::Input(_))));
    }

    #[test]
    fn over_length_prompt_is_truncated_not_rejected() {
        let bb = tiny();
        let long = vec!["word"; 100].join(" ");
        let e = bb.encode_text(&long).unwrap();
        assert!(e.to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_masking_changes_the_embedding() {
        let bb = tiny();
        let img = test_image(32, 32);
        let mask = crate::imaging::BinaryMask::from_fn(32, 32, |x, _| x < 16);
        let plain = bb.image_embedding(&img, &AttentionMaskPolicy::none()).unwrap();
        let policy = AttentionMaskPolicy::from_pixel_mask(MaskMode::AllTokensAllLayers, &mask, 4).unwrap();
        let masked = bb.image_embedding(&img, &policy).unwrap();
        assert_ne!(plain.to_vec1::<f32>().unwrap(), masked.to_vec1::<f32>().unwrap());
        let full = AttentionMaskPolicy::from_pixel_mask(
            MaskMode::AllTokensAllLayers,
            &crate::imaging::BinaryMask::full(32, 32),
            4,
        )
        .unwrap();
        let same = bb.image_embedding(&img, &full).unwrap();
        assert_eq!(plain.to_vec1::<f32>().unwrap(), same.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn weights_round_trip_through_the_pretrained_loader() {
        let bb = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.safetensors");
        bb.save_weights(&path).unwrap();
        let mut cfg = BackboneConfig::tiny(0);
        cfg.variant = BackboneVariant::PretrainedDualEncoder;
        cfg.weights = Some(path);
        let loaded = Backbone::new(cfg).unwrap();
        assert_eq!(loaded.checksum().unwrap(), bb.checksum().unwrap());
    }

    #[test]
    fn batch_rows_match_single_encodes() {
        let bb = tiny();
        let a = test_image(32, 32);
        let b = Rgb32FImage::from_fn(32, 32, |x, _| Rgb([0.1, x as f32 / 32.0, 0.9]));
        let batch = bb.encode_batch(&[&a, &b], &[1]).unwrap();
        let single = bb.encode_batch(&[&b], &[1]).unwrap();
        let row: Vec<f32> = batch.layers[0].i(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let one: Vec<f32> = single.layers[0].i(0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (x, y) in row.iter().zip(&one) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
