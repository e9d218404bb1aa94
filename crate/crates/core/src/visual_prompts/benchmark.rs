use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::Rgb32FImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::compose::{compose_prompt, CompositionConfig};
use super::recipe::CompositionRecipe;
use crate::backbone::{cosine, AttentionMaskPolicy, Backbone, MaskMode};
use crate::error::{Error, Result};
use crate::imaging::{load_mask, load_rgb, resize_rgb, BinaryMask};

/// How the "highlighted" image embedding is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptVariant {
    /// Encode the composed image.
    Recipe(CompositionRecipe),
    /// Encode the original image with attention restricted to the object.
    AttentionMask { id: String, mode: MaskMode },
}

impl PromptVariant {
    pub fn id(&self) -> &str {
        match self {
            PromptVariant::Recipe(r) => &r.id,
            PromptVariant::AttentionMask { id, .. } => id,
        }
    }

    /// The three attention-masking rows of the alignment study, for a
    /// backbone with `num_layers` blocks.
    pub fn attention_variants(num_layers: usize) -> Vec<PromptVariant> {
        vec![
            PromptVariant::AttentionMask {
                id: format!("attn_mask_cls_layer_{}", num_layers - 1),
                mode: MaskMode::ClsOnlyLayer(num_layers - 1),
            },
            PromptVariant::AttentionMask {
                id: "attn_mask_cls_all_layers".into(),
                mode: MaskMode::ClsOnlyAllLayers,
            },
            PromptVariant::AttentionMask {
                id: "attn_mask_all_tokens_all_layers".into(),
                mode: MaskMode::AllTokensAllLayers,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub recipe_id: String,
    /// `cos(s_h, t_0) - cos(s_o, t_0)`.
    pub delta_p: f64,
    /// `delta_p` times 100.
    pub delta_p_scaled: f64,
    /// Change in the softmax probability of the target name.
    pub delta_prob: f64,
    /// Softmax over `logit_scale * cos(s_h, t_i)`, in candidate order.
    pub softmax_distribution: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub composition: CompositionConfig,
    /// Samples are resized to this square side first; `None` uses the
    /// backbone's native input size.
    pub input_size: Option<u32>,
    /// Temperature applied to cosine alignments before the softmax. The
    /// default is the usual fixed logit scale of dual-encoder models.
    pub logit_scale: f64,
    /// Text template for candidate names; `{}` is replaced by the name.
    pub name_template: String,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            composition: CompositionConfig::default(),
            input_size: None,
            logit_scale: 100.0,
            name_template: "{}".into(),
        }
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Embeddings needed by one alignment computation.
struct SampleContext<'a> {
    image: &'a Rgb32FImage,
    mask: &'a BinaryMask,
    s_o: Tensor,
    names: &'a [String],
    texts: Vec<Tensor>,
}

fn highlighted(backbone: &Backbone, ctx: &SampleContext, variant: &PromptVariant, cfg: &BenchmarkConfig) -> Result<Tensor> {
    match variant {
        PromptVariant::Recipe(r) if r.steps.iter().all(|s| *s == super::CompositionStep::None) => Ok(ctx.s_o.clone()),
        PromptVariant::Recipe(r) => {
            let composed = compose_prompt(ctx.image, ctx.mask, r, &cfg.composition)?;
            backbone.image_embedding(&composed.image, &AttentionMaskPolicy::none())
        }
        PromptVariant::AttentionMask { mode, .. } => {
            let p = backbone.config().patch_size;
            let policy = AttentionMaskPolicy::from_pixel_mask(*mode, ctx.mask, p)?;
            backbone.image_embedding(ctx.image, &policy)
        }
    }
}

fn align(backbone: &Backbone, ctx: &SampleContext, variant: &PromptVariant, cfg: &BenchmarkConfig) -> Result<AlignmentResult> {
    let s_h = highlighted(backbone, ctx, variant, cfg)?;
    let a_h = ctx.texts.iter().map(|t| cosine(&s_h, t)).collect::<Result<Vec<_>>>()?;
    let a_o = ctx.texts.iter().map(|t| cosine(&ctx.s_o, t)).collect::<Result<Vec<_>>>()?;
    let scale = |v: &[f64]| v.iter().map(|x| x * cfg.logit_scale).collect::<Vec<_>>();
    let p_h = softmax(&scale(&a_h));
    let p_o = softmax(&scale(&a_o));
    let delta_p = a_h[0] - a_o[0];
    Ok(AlignmentResult {
        recipe_id: variant.id().to_string(),
        delta_p,
        delta_p_scaled: delta_p * 100.0,
        delta_prob: p_h[0] - p_o[0],
        softmax_distribution: ctx.names.iter().cloned().zip(p_h).collect(),
    })
}

fn name_order(target: &str, candidates: &[String]) -> Result<Vec<String>> {
    if !candidates.iter().any(|c| c == target) {
        return Err(Error::input(format!("target {target:?} is not among the candidate names")));
    }
    let mut names = vec![target.to_string()];
    names.extend(candidates.iter().filter(|c| *c != target).cloned());
    Ok(names)
}

/// Alignment change of the target name when the image is replaced by its
/// highlighted version. The target is `t_0`; the distribution lists it first.
pub fn alignment_delta(
    backbone: &Backbone,
    image: &Rgb32FImage,
    mask: &BinaryMask,
    target_name: &str,
    candidate_names: &[String],
    variant: &PromptVariant,
    cfg: &BenchmarkConfig,
) -> Result<AlignmentResult> {
    let names = name_order(target_name, candidate_names)?;
    let texts = names
        .iter()
        .map(|n| backbone.encode_text(&cfg.name_template.replace("{}", n)))
        .collect::<Result<Vec<_>>>()?;
    let ctx = SampleContext {
        image,
        mask,
        s_o: backbone.image_embedding(image, &AttentionMaskPolicy::none())?,
        names: &names,
        texts,
    };
    align(backbone, &ctx, variant, cfg)
}

#[derive(Debug, Clone)]
pub struct BenchSample {
    pub image: Rgb32FImage,
    pub mask: BinaryMask,
    pub target: String,
    pub distractors: Vec<String>,
}

/// On-disk form: one JSON object per line, paths relative to the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSampleRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub target: String,
    pub distractors: Vec<String>,
}

pub fn load_bench_samples(path: &Path) -> Result<Vec<BenchSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let r: BenchSampleRecord = serde_json::from_str(line)?;
            Ok(BenchSample {
                image: load_rgb(&base.join(&r.image))?,
                mask: load_mask(&base.join(&r.mask))?,
                target: r.target,
                distractors: r.distractors,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub recipe_id: String,
    pub n_samples: usize,
    pub mean_delta_p: f64,
    pub std: f64,
    pub skipped: usize,
    pub mean_delta_prob: f64,
}

impl BenchmarkRow {
    pub fn mean_delta_p_scaled(&self) -> f64 {
        self.mean_delta_p * 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    /// Sorted by `mean_delta_p`, descending.
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("recipe_id,n_samples,mean_delta_p,std,skipped\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.recipe_id, r.n_samples, r.mean_delta_p, r.std, r.skipped);
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let width = self.rows.iter().map(|r| r.recipe_id.len()).max().unwrap_or(6).max(6);
        let mut out = format!(
            "{:<width$}  {:>7}  {:>10}  {:>8}  {:>10}  {:>7}\n",
            "recipe", "n", "dP x100", "std x100", "dProb", "skipped"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>10.2}  {:>8.2}  {:>10.4}  {:>7}",
                r.recipe_id,
                r.n_samples,
                r.mean_delta_p_scaled(),
                r.std * 100.0,
                r.mean_delta_prob,
                r.skipped
            );
        }
        out
    }

    pub fn row(&self, id: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.recipe_id == id)
    }
}

#[derive(Debug, Default, Clone)]
struct Partial {
    deltas: Vec<f64>,
    probs: Vec<f64>,
    skipped: usize,
}

impl Partial {
    fn merge(mut self, other: Partial) -> Partial {
        self.deltas.extend(other.deltas);
        self.probs.extend(other.probs);
        self.skipped += other.skipped;
        self
    }
}

fn prepare(sample: &BenchSample, side: u32) -> Result<(Rgb32FImage, BinaryMask)> {
    if sample.image.dimensions() != sample.mask.dims() {
        return Err(Error::input("sample mask and image differ in size"));
    }
    if sample.mask.is_empty() {
        return Err(Error::DegenerateMask("sample mask is empty".into()));
    }
    let image = resize_rgb(&sample.image, side, side);
    let mask = sample.mask.resize_nearest(side, side);
    if mask.is_empty() {
        return Err(Error::DegenerateMask("mask vanished after resizing".into()));
    }
    Ok((image, mask))
}

/// Mean alignment change per variant over `samples`, ranked best first.
/// Samples are processed in parallel; results are gathered in sample order
/// so the sums, and hence the table, do not depend on scheduling.
pub fn run_prompt_benchmark(
    backbone: &Backbone,
    samples: &[BenchSample],
    variants: &[PromptVariant],
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkTable> {
    if samples.is_empty() || variants.is_empty() {
        return Err(Error::input("benchmark needs at least one sample and one recipe"));
    }
    let side = cfg.input_size.unwrap_or(backbone.config().native_size() as u32);

    // Text embeddings are shared across samples; compute each once.
    let mut text_cache: HashMap<String, Tensor> = HashMap::new();
    for s in samples {
        for name in std::iter::once(&s.target).chain(&s.distractors) {
            if !text_cache.contains_key(name) {
                let t = backbone.encode_text(&cfg.name_template.replace("{}", name))?;
                text_cache.insert(name.clone(), t);
            }
        }
    }

    let per_sample: Vec<Vec<Result<AlignmentResult>>> = samples
        .par_iter()
        .map(|sample| {
            let ctx = (|| {
                let (image, mask) = prepare(sample, side)?;
                let mut candidates = sample.distractors.clone();
                candidates.push(sample.target.clone());
                let names = name_order(&sample.target, &candidates)?;
                let s_o = backbone.image_embedding(&image, &AttentionMaskPolicy::none())?;
                Ok::<_, Error>((image, mask, names, s_o))
            })();
            match ctx {
                Err(e) => variants.iter().map(|_| Err(Error::input(e.to_string()))).collect(),
                Ok((image, mask, names, s_o)) => {
                    let texts = names.iter().map(|n| text_cache[n].clone()).collect();
                    let ctx = SampleContext {
                        image: &image,
                        mask: &mask,
                        s_o,
                        names: &names,
                        texts,
                    };
                    variants.iter().map(|v| align(backbone, &ctx, v, cfg)).collect()
                }
            }
        })
        .collect();

    let mut partials = vec![Partial::default(); variants.len()];
    for (i, results) in per_sample.into_iter().enumerate() {
        for (j, r) in results.into_iter().enumerate() {
            let part = match r {
                Ok(a) => Partial {
                    deltas: vec![a.delta_p],
                    probs: vec![a.delta_prob],
                    skipped: 0,
                },
                Err(e) => {
                    tracing::warn!(sample = i, recipe = variants[j].id(), error = %e, "benchmark sample skipped");
                    Partial {
                        skipped: 1,
                        ..Default::default()
                    }
                }
            };
            partials[j] = std::mem::take(&mut partials[j]).merge(part);
        }
    }

    let mut rows: Vec<BenchmarkRow> = variants
        .iter()
        .zip(partials)
        .map(|(v, p)| {
            let n = p.deltas.len();
            let mean = if n > 0 { p.deltas.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let std = if n > 1 {
                (p.deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let mean_prob = if n > 0 { p.probs.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            BenchmarkRow {
                recipe_id: v.id().to_string(),
                n_samples: n,
                mean_delta_p: mean,
                std,
                skipped: p.skipped,
                mean_delta_prob: mean_prob,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.mean_delta_p.total_cmp(&a.mean_delta_p));
    Ok(BenchmarkTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(&[100.0, -3.0, 0.5, 99.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn target_must_be_a_candidate() {
        let names = vec!["dog".to_string(), "cat".to_string()];
        assert_eq!(name_order("cat", &names).unwrap(), vec!["cat", "dog"]);
        assert!(name_order("cow", &names).is_err());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let t = BenchmarkTable {
            rows: vec![BenchmarkRow {
                recipe_id: "none".into(),
                n_samples: 3,
                mean_delta_p: 0.0,
                std: 0.0,
                skipped: 1,
                mean_delta_prob: 0.0,
            }],
        };
        assert_eq!(t.to_csv(), "recipe_id,n_samples,mean_delta_p,std,skipped\nnone,3,0,0,1\n");
        assert!(t.to_pretty().contains("none"));
    }
}
