//! Conditional vectors: the single embedding that tells the decoder what
//! to segment. They come from text, from a composed visual prompt, or from a
//! convex mix of the two.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::Rgb32FImage;
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionMaskPolicy, Backbone};
use crate::error::{Error, Result};
use crate::imaging::{load_mask, load_rgb, BinaryMask};
use crate::visual_prompts::{compose_prompt, CompositionConfig, CompositionRecipe, RecipeRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Text { prompt: String },
    Visual { recipe: String },
    Interpolated { weight: f64 },
    Raw,
}

/// A `(D_emb,)` embedding in the joint space.
#[derive(Debug, Clone)]
pub struct ConditionalVector {
    values: Tensor,
    pub provenance: Provenance,
}

impl ConditionalVector {
    pub fn new(values: Tensor, provenance: Provenance) -> Result<Self> {
        if values.rank() != 1 {
            return Err(Error::input(format!("conditional vector must be 1-D, got {:?}", values.dims())));
        }
        let finite = values
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::input("conditional vector has non-finite entries"));
        }
        Ok(Self { values, provenance })
    }

    pub fn from_vec(values: Vec<f32>, device: &Device) -> Result<Self> {
        let n = values.len();
        Self::new(Tensor::from_vec(values, n, device)?, Provenance::Raw)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.values.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// Stack into a `(B, D_emb)` batch.
    pub fn stack(vectors: &[ConditionalVector]) -> Result<Tensor> {
        if vectors.is_empty() {
            return Err(Error::input("no conditional vectors to stack"));
        }
        let ts: Vec<&Tensor> = vectors.iter().map(|v| &v.values).collect();
        Ok(Tensor::stack(&ts, 0)?)
    }
}

pub fn condition_from_text(backbone: &Backbone, prompt: &str) -> Result<ConditionalVector> {
    let values = backbone.encode_text(prompt)?;
    ConditionalVector::new(
        values,
        Provenance::Text {
            prompt: prompt.to_string(),
        },
    )
}

/// Embedding of the composed support image. The support image must have a
/// size the backbone accepts.
pub fn condition_from_visual(
    backbone: &Backbone,
    image: &Rgb32FImage,
    mask: &BinaryMask,
    recipe: &CompositionRecipe,
    cfg: &CompositionConfig,
) -> Result<ConditionalVector> {
    if mask.is_empty() {
        return Err(Error::DegenerateMask("visual prompt mask is empty".into()));
    }
    let composed = compose_prompt(image, mask, recipe, cfg)?;
    let values = backbone.image_embedding(&composed.image, &AttentionMaskPolicy::none())?;
    ConditionalVector::new(
        values,
        Provenance::Visual {
            recipe: recipe.id.clone(),
        },
    )
}

/// `a * s + (1 - a) * t`, computed in f64 and clamped to the per-coordinate
/// hull so rounding never leaves the segment. The endpoints are returned
/// bit for bit. No renormalization is applied.
pub fn interpolate(s: &ConditionalVector, t: &ConditionalVector, a: f64) -> Result<ConditionalVector> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::input(format!("interpolation weight {a} outside [0, 1]")));
    }
    if s.values.dims() != t.values.dims() {
        return Err(Error::input(format!(
            "cannot mix vectors of shape {:?} and {:?}",
            s.values.dims(),
            t.values.dims()
        )));
    }
    let provenance = Provenance::Interpolated { weight: a };
    if a == 1.0 {
        return Ok(ConditionalVector {
            values: s.values.clone(),
            provenance,
        });
    }
    if a == 0.0 {
        return Ok(ConditionalVector {
            values: t.values.clone(),
            provenance,
        });
    }
    let sv = s.to_vec()?;
    let tv = t.to_vec()?;
    let mixed: Vec<f64> = sv
        .iter()
        .zip(&tv)
        .map(|(&x, &y)| (a * x + (1.0 - a) * y).clamp(x.min(y), x.max(y)))
        .collect();
    let dtype = s.values.dtype();
    let values = Tensor::from_vec(mixed, sv.len(), s.values.device())?.to_dtype(dtype)?;
    // Rounding back to a narrower dtype can step just outside the hull of
    // the endpoints, which are themselves representable: clamp again there.
    let lo = s.values.minimum(&t.values)?;
    let hi = s.values.maximum(&t.values)?;
    let values = values.maximum(&lo)?.minimum(&hi)?;
    Ok(ConditionalVector { values, provenance })
}

/// Training-time mixing weight, uniform on `[0, 1]`.
pub fn sample_interpolation_weight<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Uniform::new_inclusive(0.0, 1.0).sample(rng)
}

/// A prompt in memory, ready to embed.
#[derive(Debug, Clone)]
pub enum Prompt {
    Text(String),
    Visual {
        image: Rgb32FImage,
        mask: BinaryMask,
        recipe: CompositionRecipe,
    },
    /// Weight `a` goes to the visual side.
    Mixed {
        text: String,
        image: Rgb32FImage,
        mask: BinaryMask,
        recipe: CompositionRecipe,
        a: f64,
    },
}

impl Prompt {
    pub fn condition(&self, backbone: &Backbone, cfg: &CompositionConfig) -> Result<ConditionalVector> {
        match self {
            Prompt::Text(text) => condition_from_text(backbone, text),
            Prompt::Visual { image, mask, recipe } => condition_from_visual(backbone, image, mask, recipe, cfg),
            Prompt::Mixed {
                text,
                image,
                mask,
                recipe,
                a,
            } => {
                let visual = condition_from_visual(backbone, image, mask, recipe, cfg)?;
                let text = condition_from_text(backbone, text)?;
                interpolate(&visual, &text, *a)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Text,
    Visual,
    Interpolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportSpec {
    pub image: PathBuf,
    pub mask: PathBuf,
    /// Registered recipe id or recipe expression; the default recipe if absent.
    #[serde(default)]
    pub recipe: Option<String>,
}

/// Serialized prompt as found in prompt files and request bodies. Paths are
/// resolved against a caller-supplied base directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<SupportSpec>,
    /// Visual weight of an interpolated prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
}

impl PromptSpec {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            kind: PromptKind::Text,
            text: Some(text.into()),
            support: None,
            a: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let has_text = self.text.as_ref().is_some_and(|t| !t.trim().is_empty());
        let has_support = self.support.is_some();
        match self.kind {
            PromptKind::Text if !has_text => Err(Error::input("text prompt without text")),
            PromptKind::Visual if !has_support => Err(Error::input("visual prompt without support image and mask")),
            PromptKind::Interpolated => {
                if !has_text || !has_support {
                    return Err(Error::input("interpolated prompt needs text and a support image"));
                }
                match self.a {
                    Some(a) if (0.0..=1.0).contains(&a) => Ok(()),
                    Some(a) => Err(Error::input(format!("interpolation weight {a} outside [0, 1]"))),
                    None => Err(Error::input("interpolated prompt needs a weight `a`")),
                }
            }
            _ => Ok(()),
        }
    }

    pub fn resolve(&self, base: &Path, registry: &RecipeRegistry) -> Result<Prompt> {
        self.validate()?;
        let visual = || -> Result<(Rgb32FImage, BinaryMask, CompositionRecipe)> {
            let s = self.support.as_ref().expect("validated");
            let recipe = registry.resolve(s.recipe.as_deref().unwrap_or(crate::visual_prompts::DEFAULT_RECIPE))?;
            Ok((load_rgb(&base.join(&s.image))?, load_mask(&base.join(&s.mask))?, recipe))
        };
        let text = || self.text.clone().expect("validated");
        Ok(match self.kind {
            PromptKind::Text => Prompt::Text(text()),
            PromptKind::Visual => {
                let (image, mask, recipe) = visual()?;
                Prompt::Visual { image, mask, recipe }
            }
            PromptKind::Interpolated => {
                let (image, mask, recipe) = visual()?;
                Prompt::Mixed {
                    text: text(),
                    image,
                    mask,
                    recipe,
                    a: self.a.expect("validated"),
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cv(v: &[f32]) -> ConditionalVector {
        ConditionalVector::from_vec(v.to_vec(), &Device::Cpu).unwrap()
    }

    #[test]
    fn endpoints_are_exact() {
        let s = cv(&[0.1, -2.5, 3.3]);
        let t = cv(&[7.0, 0.2, -1.0]);
        let one = interpolate(&s, &t, 1.0).unwrap().values().to_vec1::<f32>().unwrap();
        let zero = interpolate(&s, &t, 0.0).unwrap().values().to_vec1::<f32>().unwrap();
        assert_eq!(one, vec![0.1, -2.5, 3.3]);
        assert_eq!(zero, vec![7.0, 0.2, -1.0]);
    }

    #[test]
    fn midpoint_is_average() {
        let s = cv(&[1.0, 2.0]);
        let t = cv(&[3.0, -2.0]);
        let m = interpolate(&s, &t, 0.5).unwrap().values().to_vec1::<f32>().unwrap();
        assert_eq!(m, vec![2.0, 0.0]);
    }

    #[test]
    fn bad_weight_and_shape_are_rejected() {
        let s = cv(&[1.0, 2.0]);
        assert!(interpolate(&s, &s, 1.5).is_err());
        assert!(interpolate(&s, &s, f64::NAN).is_err());
        assert!(interpolate(&s, &cv(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(ConditionalVector::from_vec(vec![1.0, f32::NAN], &Device::Cpu).is_err());
    }

    #[test]
    fn sampled_weights_stay_in_unit_interval() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let ws: Vec<f64> = (0..1000).map(|_| sample_interpolation_weight(&mut rng)).collect();
        assert!(ws.iter().all(|w| (0.0..=1.0).contains(w)));
        let mean = ws.iter().sum::<f64>() / ws.len() as f64;
        assert!((mean - 0.5).abs() < 0.05);
    }

    #[test]
    fn spec_invariants_follow_kind() {
        let blank = PromptSpec::text("  ");
        assert!(matches!(blank.validate(), Err(Error::Input(_))));
        let p = PromptSpec::text("a cat").resolve(Path::new("."), &RecipeRegistry::default()).unwrap();
        assert!(matches!(p, Prompt::Text(t) if t == "a cat"));

        let json = r#"{"kind": "interpolated", "text": "dog",
                       "support": {"image": "s.png", "mask": "m.png", "recipe": "crop"}, "a": 1.5}"#;
        let spec: PromptSpec = serde_json::from_str(json).unwrap();
        assert!(spec.validate().is_err());
        let spec = PromptSpec { a: None, ..spec };
        assert!(spec.validate().is_err());
        let visual: PromptSpec = serde_json::from_str(r#"{"kind": "visual"}"#).unwrap();
        assert!(visual.validate().is_err());
    }
}
