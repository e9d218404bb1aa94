//! A frozen backbone and a trained decoder bundled for inference.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use image::Rgb32FImage;

use crate::backbone::{ActivationReadout, AttentionMaskPolicy, Backbone};
use crate::conditioning::{ConditionalVector, Prompt};
use crate::decoder::{load_checkpoint, save_checkpoint, Decoder, SegmentationLogits};
use crate::error::{Error, Result};
use crate::visual_prompts::CompositionConfig;

#[derive(Debug)]
pub struct SegmentationModel {
    pub backbone: Arc<Backbone>,
    pub decoder: Decoder,
    pub composition: CompositionConfig,
}

impl SegmentationModel {
    pub fn new(backbone: Arc<Backbone>, decoder: Decoder) -> Result<Self> {
        decoder.config().check_backbone(backbone.config())?;
        Ok(Self {
            backbone,
            decoder,
            composition: CompositionConfig::default(),
        })
    }

    pub fn readout(&self, image: &Rgb32FImage) -> Result<ActivationReadout> {
        self.backbone
            .encode_image(image, &self.decoder.config().readout_layers, &AttentionMaskPolicy::none())
    }

    pub fn segment(&self, image: &Rgb32FImage, cond: &ConditionalVector) -> Result<SegmentationLogits> {
        let readout = self.readout(image)?;
        self.decoder
            .predict(&readout, cond, (image.height() as usize, image.width() as usize))
    }

    pub fn condition(&self, prompt: &Prompt) -> Result<ConditionalVector> {
        prompt.condition(&self.backbone, &self.composition)
    }

    pub fn segment_prompt(&self, image: &Rgb32FImage, prompt: &Prompt) -> Result<SegmentationLogits> {
        self.segment(image, &self.condition(prompt)?)
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        save_checkpoint(path, &self.decoder, &self.backbone.metadata()?, extra)
    }

    /// Load a checkpoint and rebuild its backbone from the recorded config.
    /// The rebuilt backbone must reproduce the recorded weight checksum.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let backbone = Backbone::new(ckpt.backbone.config.clone())?;
        Self::with_backbone(ckpt, Arc::new(backbone))
    }

    /// Load a checkpoint against an already constructed backbone.
    pub fn load_with(path: &Path, backbone: Arc<Backbone>) -> Result<Self> {
        Self::with_backbone(load_checkpoint(path)?, backbone)
    }

    fn with_backbone(ckpt: crate::decoder::Checkpoint, backbone: Arc<Backbone>) -> Result<Self> {
        let found = backbone.checksum()?;
        if found != ckpt.backbone.checksum {
            return Err(Error::Checkpoint(format!(
                "backbone checksum {found} differs from the one recorded at training time ({})",
                ckpt.backbone.checksum
            )));
        }
        Self::new(backbone, ckpt.decoder)
    }
}
