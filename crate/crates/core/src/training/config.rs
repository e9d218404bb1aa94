use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::datasets::{CropConfig, PrefixRegistry, SynthConfig};
use crate::decoder::{ComputePrecision, DecoderConfig, DecoderVariant};
use crate::error::{Error, Result};
use crate::visual_prompts::DEFAULT_RECIPE;

/// Optimization settings. Defaults are the full-scale schedule; see
/// [`TrainConfig::desk`] for a laptop-sized one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_final: f64,
    /// Half-precision decoder activations over f32 master weights.
    pub mixed_precision: bool,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Mix text and support embeddings with a fresh uniform weight.
    pub interpolation: bool,
    pub prefixes: PrefixRegistry,
    /// Random object-aware crops; disables readout caching.
    pub crop: Option<CropConfig>,
    /// Square training side; the backbone's native size when unset.
    pub image_size: Option<u32>,
    /// Encode every training image once up front.
    pub cache_readouts: bool,
    /// Recipe used to turn supports into visual prompts.
    pub support_recipe: String,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 64,
            lr0: 1e-3,
            lr_final: 1e-4,
            mixed_precision: false,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            interpolation: true,
            prefixes: PrefixRegistry::default(),
            crop: None,
            image_size: None,
            cache_readouts: true,
            support_recipe: DEFAULT_RECIPE.to_string(),
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            iterations: 500,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr0 >= 0.0 && self.lr_final >= 0.0 && self.lr_final <= self.lr0) {
            return Err(Error::config(format!(
                "need 0 <= lr_final <= lr0, got lr0 {} and lr_final {}",
                self.lr0, self.lr_final
            )));
        }
        if let Some(c) = &self.crop {
            c.validate()?;
        }
        Ok(())
    }
}

/// Backbone named by preset or spelled out in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackboneChoice {
    Preset { preset: String, #[serde(default)] seed: u64 },
    Config(BackboneConfig),
}

impl Default for BackboneChoice {
    fn default() -> Self {
        BackboneChoice::Preset {
            preset: "tiny".into(),
            seed: 0,
        }
    }
}

impl BackboneChoice {
    pub fn resolve(&self) -> Result<BackboneConfig> {
        match self {
            BackboneChoice::Config(c) => Ok(c.clone()),
            BackboneChoice::Preset { preset, seed } => match preset.as_str() {
                "tiny" => Ok(BackboneConfig::tiny(*seed)),
                "vit-b16" | "vit-b16-stand-in" => Ok(BackboneConfig::vit_b16_stand_in(*seed)),
                other => Err(Error::config(format!(
                    "unknown backbone preset {other:?} (expected tiny or vit-b16)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSpec {
    pub variant: DecoderVariant,
    pub width: Option<usize>,
    pub readout_layers: Option<Vec<usize>>,
    pub param_precision: Option<ComputePrecision>,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            variant: DecoderVariant::Clipseg,
            width: None,
            readout_layers: None,
            param_precision: None,
        }
    }
}

impl DecoderSpec {
    /// Full decoder config for `backbone`. Without explicit layers a small
    /// backbone gets evenly spread readouts ending one layer before the top.
    pub fn resolve(&self, backbone: &BackboneConfig) -> DecoderConfig {
        let mut cfg = match self.variant {
            DecoderVariant::Clipseg => DecoderConfig::clipseg(backbone),
            DecoderVariant::ClipDeconv => DecoderConfig::clip_deconv(backbone),
        };
        if let Some(w) = self.width {
            cfg = cfg.with_width(w);
        }
        let n = backbone.num_layers();
        if let Some(layers) = &self.readout_layers {
            cfg = cfg.with_layers(layers.clone());
        } else if self.variant == DecoderVariant::Clipseg && cfg.readout_layers.iter().any(|&l| l >= n) {
            let layers: Vec<usize> = (1..n).collect();
            let take = layers.len().min(3);
            cfg = cfg.with_layers(layers[layers.len() - take..].to_vec());
        }
        if let Some(p) = self.param_precision {
            cfg.param_precision = p;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    #[serde(default)]
    pub seed: u64,
    pub n: usize,
    #[serde(default)]
    pub config: SynthConfig,
}

/// Where training records come from: a JSON-lines index under `root`, or a
/// generated shapes set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default)]
    pub index: Option<PathBuf>,
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticData>,
    /// Negative rate used when the records still need supports and negatives.
    #[serde(default = "default_q_neg")]
    pub q_neg: f64,
    /// Add supports and negatives after loading. Indexes written by
    /// `build-dataset` already have them.
    #[serde(default)]
    pub build: bool,
}

fn default_q_neg() -> f64 {
    0.2
}

/// Everything a `train` run needs, as read from YAML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub backbone: BackboneChoice,
    #[serde(default)]
    pub decoder: DecoderSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Directory receiving the checkpoint and the loss curve.
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        serde_yaml::from_str(text).map_err(|e| Error::config(format!("train config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_yaml(&text)?;
        // relative data paths are taken from the config file's directory
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.data.index.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.data.root.as_mut() {
            rebase(p);
        }
        rebase(&mut cfg.output);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match (&self.data.index, &self.data.synthetic) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::config("data needs exactly one of index or synthetic")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_full_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.iterations, c.batch_size), (20_000, 64));
        assert_eq!((c.lr0, c.lr_final), (1e-3, 1e-4));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let bad = TrainConfig {
            lr_final: 0.1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn yaml_experiment_parses() {
        let yaml = r#"
backbone: {preset: tiny, seed: 3}
decoder: {width: 32}
data:
  synthetic: {seed: 1, n: 16}
  q_neg: 0.2
  build: true
train:
  iterations: 10
  batch_size: 4
  lr0: 0.01
output: runs/a
"#;
        let cfg = ExperimentConfig::from_yaml(yaml).unwrap();
        cfg.validate().unwrap();
        let bb = cfg.backbone.resolve().unwrap();
        assert_eq!(bb, BackboneConfig::tiny(3));
        let dec = cfg.decoder.resolve(&bb);
        assert_eq!(dec.width, 32);
        assert_eq!(dec.readout_layers, vec![1, 2, 3]);
        dec.check_backbone(&bb).unwrap();
        assert_eq!(cfg.train.iterations, 10);
        assert_eq!(cfg.train.lr_final, 1e-4);
    }

    #[test]
    fn unknown_keys_are_configuration_errors() {
        let yaml = "data: {synthetic: {n: 2}}\noutput: x\ntrain: {iteration: 3}\n";
        assert!(matches!(ExperimentConfig::from_yaml(yaml), Err(Error::Config(_))));
    }
}
