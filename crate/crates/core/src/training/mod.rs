//! Decoder training: frozen backbone, pixelwise binary cross entropy, AdamW
//! under a cosine schedule.

mod config;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::Rgb32FImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{BackboneChoice, DataSpec, DecoderSpec, ExperimentConfig, SyntheticData, TrainConfig};

use crate::backbone::{ActivationReadout, Backbone};
use crate::conditioning::{
    condition_from_text, condition_from_visual, interpolate, sample_interpolation_weight, ConditionalVector,
};
use crate::datasets::{
    augment_phrase, build_phrasecut_plus, object_aware_crop, read_jsonl, shard, synth_dataset, DataStore, FileStore,
    SampleRecord,
};
use crate::decoder::{ComputePrecision, Decoder};
use crate::error::{Error, Result};
use crate::imaging::{resize_rgb, BinaryMask};
use crate::model::SegmentationModel;
use crate::visual_prompts::{CompositionConfig, CompositionRecipe, RecipeRegistry};

/// `lr_final + (lr0 - lr_final) * (1 + cos(pi * step / iterations)) / 2`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.iterations {
        return Err(Error::input(format!(
            "step {step} beyond the schedule of {} iterations",
            cfg.iterations
        )));
    }
    if step == cfg.iterations {
        return Ok(cfg.lr_final);
    }
    let progress = step as f64 / cfg.iterations as f64;
    Ok(cfg.lr_final + (cfg.lr0 - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
}

/// Mean of `max(x, 0) - x * y + log(1 + exp(-|x|))` over every pixel.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    // half-precision logits are widened; f64 stays f64
    let dtype = if logits.dtype() == DType::F64 { DType::F64 } else { DType::F32 };
    let x = logits.to_dtype(dtype)?;
    let y = targets.to_dtype(dtype)?;
    let soft = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let loss = ((x.relu()? - (&x * &y)?)? + soft)?;
    Ok(loss.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_csv(path: &Path, points: &[LossPoint]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = String::from("step,lr,loss\n");
    for p in points {
        out.push_str(&format!("{},{:e},{:e}\n", p.step, p.lr, p.loss));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub losses: Vec<LossPoint>,
    pub backbone_checksum: String,
    /// Optimizer description for checkpoint metadata.
    pub extra: BTreeMap<String, String>,
}

/// A record with pixels loaded and resized to the training side.
struct Prepared {
    image: Rgb32FImage,
    target: BinaryMask,
    /// Composed support prompt, resized like the image.
    support: Option<(Rgb32FImage, BinaryMask)>,
}

fn prepare(store: &dyn DataStore, r: &SampleRecord, side: u32, crop_later: bool) -> Result<Prepared> {
    let image = store.image(&r.image)?;
    let target = crate::datasets::load_target(store, r, &image)?;
    let (image, target) = if crop_later {
        (image, target)
    } else {
        (resize_rgb(&image, side, side), target.resize_nearest(side, side))
    };
    let support = match (&r.support_image, &r.support_mask, r.negative) {
        (Some(i), Some(m), false) => {
            let si = store.image(i)?;
            let sm = store.mask(m)?;
            if sm.is_empty() {
                None
            } else {
                Some((resize_rgb(&si, side, side), sm.resize_nearest(side, side)))
            }
        }
        _ => None,
    };
    Ok(Prepared { image, target, support })
}

/// Load every record, splitting the work into contiguous shards.
fn prepare_all(store: &dyn DataStore, records: &[SampleRecord], side: u32, crop_later: bool) -> Result<Vec<Prepared>> {
    let shards = rayon::current_num_threads().max(1).min(records.len().max(1));
    let parts: Vec<Result<Vec<Prepared>>> = (0..shards)
        .into_par_iter()
        .map(|i| {
            shard(records, i, shards)
                .iter()
                .map(|r| prepare(store, r, side, crop_later))
                .collect()
        })
        .collect();
    Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

struct Conditioner<'a> {
    backbone: &'a Backbone,
    recipe: CompositionRecipe,
    composition: CompositionConfig,
    text: HashMap<String, ConditionalVector>,
    visual: HashMap<usize, ConditionalVector>,
}

impl Conditioner<'_> {
    fn text(&mut self, phrase: &str) -> Result<ConditionalVector> {
        if let Some(v) = self.text.get(phrase) {
            return Ok(v.clone());
        }
        let v = condition_from_text(self.backbone, phrase)?;
        self.text.insert(phrase.to_string(), v.clone());
        Ok(v)
    }

    fn visual(&mut self, index: usize, support: &(Rgb32FImage, BinaryMask)) -> Result<ConditionalVector> {
        if let Some(v) = self.visual.get(&index) {
            return Ok(v.clone());
        }
        let v = condition_from_visual(self.backbone, &support.0, &support.1, &self.recipe, &self.composition)?;
        self.visual.insert(index, v.clone());
        Ok(v)
    }
}

fn mask_tensor(masks: &[BinaryMask], device: &candle_core::Device) -> Result<Tensor> {
    let (w, h) = masks[0].dims();
    let data: Vec<f32> = masks
        .iter()
        .flat_map(|m| m.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (masks.len(), h as usize, w as usize), device)?)
}

/// Train `decoder` on `records` against a frozen `backbone`.
///
/// Batches are drawn by walking a fresh permutation each epoch. A record
/// with a support is conditioned on `a * visual + (1 - a) * text` with `a`
/// drawn anew every time the record is used; other records use their text
/// alone. Negatives train toward an all-zero map with plain BCE.
pub fn train(
    decoder: &mut Decoder,
    backbone: &Backbone,
    store: &dyn DataStore,
    records: &[SampleRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::input("no training records"));
    }
    decoder.config().check_backbone(backbone.config())?;
    let checksum_before = backbone.checksum()?;
    let side = cfg.image_size.unwrap_or(backbone.config().native_size() as u32);
    let layers = decoder.config().readout_layers.clone();
    let device = backbone.device().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let prepared = prepare_all(store, records, side, cfg.crop.is_some())?;
    let cache_readouts = cfg.cache_readouts && cfg.crop.is_none();
    let readouts: Vec<ActivationReadout> = if cache_readouts {
        let mut out = Vec::with_capacity(prepared.len());
        for chunk in prepared.chunks(16) {
            let imgs: Vec<&Rgb32FImage> = chunk.iter().map(|p| &p.image).collect();
            let r = backbone.encode_batch(&imgs, &layers)?;
            for i in 0..chunk.len() {
                out.push(r.narrow(i, 1)?);
            }
        }
        out
    } else {
        Vec::new()
    };

    let mut cond = Conditioner {
        backbone,
        recipe: RecipeRegistry::default().resolve(&cfg.support_recipe)?,
        composition: CompositionConfig::default(),
        text: HashMap::new(),
        visual: HashMap::new(),
    };

    let previous_precision = decoder.compute_precision();
    if cfg.mixed_precision {
        decoder.set_compute_precision(ComputePrecision::F16);
    }
    let params = ParamsAdamW {
        lr: cosine_lr(0, cfg)?,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = AdamW::new(decoder.all_vars(), params)?;

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let result = (|| -> Result<()> {
        for step in 0..cfg.iterations {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size {
                if cursor == order.len() {
                    order = (0..records.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }

            let mut conds = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            let mut parts = Vec::with_capacity(batch.len());
            for &i in &batch {
                let r = &records[i];
                let p = &prepared[i];
                let phrase = augment_phrase(&r.phrase, &cfg.prefixes, &mut rng);
                let text = cond.text(&phrase)?;
                let c = match &p.support {
                    Some(s) if cfg.interpolation => {
                        let a = sample_interpolation_weight(&mut rng);
                        interpolate(&cond.visual(i, s)?, &text, a)?
                    }
                    _ => text,
                };
                conds.push(c);
                if let Some(crop) = &cfg.crop {
                    let (img, tgt) = object_aware_crop(&p.image, &p.target, r.negative, crop, &mut rng)?;
                    let img = resize_rgb(&img, side, side);
                    parts.push(backbone.encode_batch(&[&img], &layers)?);
                    targets.push(tgt.resize_nearest(side, side));
                } else {
                    if cache_readouts {
                        parts.push(readouts[i].clone());
                    } else {
                        parts.push(backbone.encode_batch(&[&p.image], &layers)?);
                    }
                    targets.push(p.target.clone());
                }
            }
            let readout = ActivationReadout::concat(&parts)?;
            let cond_t = ConditionalVector::stack(&conds)?;
            let logits = decoder.forward(&readout, &cond_t, (side as usize, side as usize))?;
            let loss = bce_with_logits(&logits, &mask_tensor(&targets, &device)?)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                let offending: Vec<&SampleRecord> = batch.iter().map(|&i| &records[i]).collect();
                tracing::error!(step, ?batch, ?offending, "non-finite loss");
                return Err(Error::NonFiniteLoss { step, batch });
            }
            let lr = cosine_lr(step, cfg)?;
            opt.set_learning_rate(lr);
            opt.backward_step(&loss)?;
            losses.push(LossPoint { step, lr, loss: value });
            if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.iterations) {
                tracing::info!(step, lr, loss = value, "train");
            }
        }
        Ok(())
    })();
    decoder.set_compute_precision(previous_precision);
    result?;

    let checksum_after = backbone.checksum()?;
    if checksum_after != checksum_before {
        return Err(Error::Checkpoint("backbone weights changed during training".into()));
    }
    let extra = BTreeMap::from([
        ("optimizer".to_string(), "adamw".to_string()),
        ("beta1".to_string(), cfg.beta1.to_string()),
        ("beta2".to_string(), cfg.beta2.to_string()),
        ("eps".to_string(), cfg.eps.to_string()),
        ("weight_decay".to_string(), cfg.weight_decay.to_string()),
        ("schedule".to_string(), format!("cosine {} -> {}", cfg.lr0, cfg.lr_final)),
        ("iterations".to_string(), cfg.iterations.to_string()),
        ("batch_size".to_string(), cfg.batch_size.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("mixed_precision".to_string(), cfg.mixed_precision.to_string()),
    ]);
    Ok(TrainOutcome {
        losses,
        backbone_checksum: checksum_after,
        extra,
    })
}

/// Records and pixel source named by a data spec.
pub fn load_data(spec: &DataSpec) -> Result<(Vec<SampleRecord>, Box<dyn DataStore>)> {
    let (records, store): (Vec<SampleRecord>, Box<dyn DataStore>) = match (&spec.index, &spec.synthetic) {
        (Some(index), None) => {
            let root = spec
                .root
                .clone()
                .or_else(|| index.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            (read_jsonl(index)?, Box::new(FileStore::new(root)))
        }
        (None, Some(s)) => {
            let d = synth_dataset(s.seed, s.n, &s.config)?;
            (d.records, Box::new(d.store))
        }
        _ => return Err(Error::config("data needs exactly one of index or synthetic")),
    };
    let records = if spec.build {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.synthetic.as_ref().map_or(0, |s| s.seed));
        build_phrasecut_plus(&records, spec.q_neg, &mut rng)?
    } else {
        records
    };
    Ok((records, store))
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub outcome: TrainOutcome,
}

/// Build the backbone and decoder named by `cfg` and train the decoder.
pub fn train_experiment(cfg: &ExperimentConfig) -> Result<(SegmentationModel, TrainOutcome)> {
    cfg.validate()?;
    let bb_cfg = cfg.backbone.resolve()?;
    let backbone = Arc::new(Backbone::new(bb_cfg.clone())?);
    let dec_cfg = cfg.decoder.resolve(&bb_cfg);
    let mut decoder = Decoder::init(dec_cfg, cfg.train.seed)?;
    let (records, store) = load_data(&cfg.data)?;
    let outcome = train(&mut decoder, &backbone, store.as_ref(), &records, &cfg.train)?;
    Ok((SegmentationModel::new(backbone, decoder)?, outcome))
}

/// Train, then write `model.safetensors` and `losses.csv` to the output
/// directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (model, outcome) = train_experiment(cfg)?;
    let checkpoint = cfg.output.join("model.safetensors");
    let loss_csv = cfg.output.join("losses.csv");
    model.save(&checkpoint, &outcome.extra)?;
    write_loss_csv(&loss_csv, &outcome.losses)?;
    Ok(ExperimentOutput {
        checkpoint,
        loss_csv,
        outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::datasets::{synth_dataset, SynthConfig};
    use crate::decoder::DecoderConfig;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 1e-3);
        assert_eq!(cosine_lr(cfg.iterations, &cfg).unwrap(), 1e-4);
        assert!((cosine_lr(cfg.iterations / 2, &cfg).unwrap() - 5.5e-4).abs() < 1e-15);
        assert!(cosine_lr(cfg.iterations + 1, &cfg).is_err());
    }

    #[test]
    fn bce_matches_a_direct_formula() {
        let dev = candle_core::Device::Cpu;
        let xs = [-30.0f32, -1.5, 0.0, 0.7, 25.0];
        let ys = [0.0f32, 1.0, 1.0, 0.0, 1.0];
        let got = bce_with_logits(&Tensor::new(&xs, &dev).unwrap(), &Tensor::new(&ys, &dev).unwrap())
            .unwrap()
            .to_scalar::<f32>()
            .unwrap() as f64;
        let want: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-(x as f64)).exp());
                let eps = 1e-300;
                -(y as f64 * (p + eps).ln() + (1.0 - y as f64) * (1.0 - p + eps).ln())
            })
            .sum::<f64>()
            / xs.len() as f64;
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    fn setup(n: usize) -> (Backbone, Decoder, crate::datasets::SynthDataset) {
        let bb = Backbone::new(BackboneConfig::tiny(0)).unwrap();
        let cfg = DecoderConfig::clipseg(bb.config()).with_width(16).with_layers(vec![1, 2, 3]);
        let dec = Decoder::init(cfg, 1).unwrap();
        let data = synth_dataset(0, n, &SynthConfig::default()).unwrap();
        (bb, dec, data)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (bb, mut dec, data) = setup(6);
        let before = dec.tensors().unwrap();
        let cfg = TrainConfig {
            iterations: 3,
            batch_size: 2,
            lr0: 0.0,
            lr_final: 0.0,
            log_every: 0,
            ..TrainConfig::default()
        };
        train(&mut dec, &bb, &data.store, &data.records, &cfg).unwrap();
        let after = dec.tensors().unwrap();
        for (k, v) in &before {
            let a: Vec<f32> = v.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = after[k].flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{k}");
        }
    }

    #[test]
    fn losses_are_finite_and_the_schedule_never_rises() {
        let (bb, mut dec, data) = setup(8);
        let records = build_phrasecut_plus(&data.records, 0.2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cfg = TrainConfig {
            iterations: 6,
            batch_size: 4,
            log_every: 0,
            ..TrainConfig::default()
        };
        let out = train(&mut dec, &bb, &data.store, &records, &cfg).unwrap();
        assert_eq!(out.losses.len(), 6);
        assert!(out.losses.iter().all(|p| p.loss.is_finite()));
        assert!(out.losses.windows(2).all(|w| w[1].lr <= w[0].lr));
        assert_eq!(out.backbone_checksum, bb.checksum().unwrap());
        assert_eq!(out.extra["optimizer"], "adamw");
    }

    #[test]
    fn same_seed_same_curve_in_double_precision() {
        let run = || {
            let bb = Backbone::new(BackboneConfig::tiny(0)).unwrap();
            let mut dcfg = DecoderConfig::clipseg(bb.config()).with_width(16).with_layers(vec![1, 2, 3]);
            dcfg.param_precision = ComputePrecision::F64;
            let mut dec = Decoder::init(dcfg, 4).unwrap();
            let data = synth_dataset(2, 8, &SynthConfig::default()).unwrap();
            let records = build_phrasecut_plus(&data.records, 0.2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let cfg = TrainConfig {
                iterations: 5,
                batch_size: 4,
                seed: 9,
                log_every: 0,
                ..TrainConfig::default()
            };
            train(&mut dec, &bb, &data.store, &records, &cfg).unwrap().losses
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_csv_has_a_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        write_loss_csv(&p, &[LossPoint { step: 0, lr: 1e-3, loss: 0.5 }]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("step,lr,loss\n0,"));
    }
}
