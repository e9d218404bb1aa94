use std::path::PathBuf;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneVariant {
    /// Dual-encoder weights loaded from a safetensors file.
    PretrainedDualEncoder,
    /// Seeded random weights with the same interface.
    StandInRandom,
    /// Vision tower not co-trained with the text tower (random stand-in
    /// with an independent vision seed).
    ImagenetVitStandIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub patch_size: usize,
    /// Token width of the vision tower.
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    /// Width of the joint image/text embedding space.
    pub embed_dim: usize,
    /// Side of the token grid the positional table was trained for.
    pub trained_grid: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Safetensors file for the pretrained variant.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// `tokenizer.json` for the pretrained variant.
    #[serde(default)]
    pub tokenizer: Option<PathBuf>,
}

impl BackboneConfig {
    /// ViT-B/16 geometry with seeded random weights.
    pub fn vit_b16_stand_in(seed: u64) -> Self {
        Self {
            variant: BackboneVariant::StandInRandom,
            patch_size: 16,
            vision_width: 768,
            vision_layers: 12,
            vision_heads: 12,
            embed_dim: 512,
            trained_grid: 14,
            text_width: 512,
            text_layers: 12,
            text_heads: 8,
            context_length: 77,
            vocab_size: 8192,
            seed,
            precision: Precision::F32,
            weights: None,
            tokenizer: None,
        }
    }

    /// ViT-B/16 geometry for the released dual-encoder checkpoint.
    pub fn vit_b16_pretrained(weights: PathBuf, tokenizer: PathBuf) -> Self {
        Self {
            variant: BackboneVariant::PretrainedDualEncoder,
            vocab_size: 49408,
            weights: Some(weights),
            tokenizer: Some(tokenizer),
            ..Self::vit_b16_stand_in(0)
        }
    }

    /// Desk-scale geometry: 4 px patches, 8x8 native grid (32x32 images).
    pub fn tiny(seed: u64) -> Self {
        Self {
            variant: BackboneVariant::StandInRandom,
            patch_size: 4,
            vision_width: 64,
            vision_layers: 4,
            vision_heads: 4,
            embed_dim: 32,
            trained_grid: 8,
            text_width: 32,
            text_layers: 2,
            text_heads: 4,
            context_length: 16,
            vocab_size: 512,
            seed,
            precision: Precision::F32,
            weights: None,
            tokenizer: None,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.vision_layers
    }

    /// Image side the positional table was trained for.
    pub fn native_size(&self) -> usize {
        self.trained_grid * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("vision_width", self.vision_width),
            ("vision_layers", self.vision_layers),
            ("vision_heads", self.vision_heads),
            ("embed_dim", self.embed_dim),
            ("trained_grid", self.trained_grid),
            ("text_width", self.text_width),
            ("text_layers", self.text_layers),
            ("text_heads", self.text_heads),
            ("context_length", self.context_length),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.context_length < 2 {
            return Err(Error::config("context_length must fit start and end markers"));
        }
        if self.vision_width % self.vision_heads != 0 {
            return Err(Error::config("vision_width must divide evenly among heads"));
        }
        if self.text_width % self.text_heads != 0 {
            return Err(Error::config("text_width must divide evenly among heads"));
        }
        if self.vocab_size < 4 {
            return Err(Error::config("vocab_size too small"));
        }
        if self.variant == BackboneVariant::PretrainedDualEncoder && self.weights.is_none() {
            return Err(Error::config("pretrained backbone needs a weights path"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for cfg in [BackboneConfig::vit_b16_stand_in(0), BackboneConfig::tiny(0)] {
            cfg.validate().unwrap();
        }
        assert_eq!(BackboneConfig::vit_b16_stand_in(0).native_size(), 224);
    }

    #[test]
    fn pretrained_without_weights_is_rejected() {
        let mut cfg = BackboneConfig::vit_b16_stand_in(0);
        cfg.variant = BackboneVariant::PretrainedDualEncoder;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn yaml_shape_round_trips_through_json() {
        let cfg = BackboneConfig::tiny(3);
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"variant\":\"stand-in-random\""));
        let back: BackboneConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
    }
}
