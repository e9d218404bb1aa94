//! Backbone parameter tables: the naming scheme, seeded stand-in weights and
//! safetensors loading. Names follow the layout of the public dual-encoder
//! checkpoints so released weights load without renaming.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use super::config::{BackboneConfig, BackboneVariant};
use crate::error::{Error, Result};
use crate::nn::{named_rng, normal_tensor, uniform_tensor};

pub type ParamTable = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Uniform(f64),
    Ones,
    Zeros,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> Spec {
    Spec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn encoder_specs(prefix: &str, width: usize, layers: usize, out: &mut Vec<Spec>) {
    let attn_std = (width as f64).powf(-0.5);
    let proj_std = attn_std * (2.0 * layers as f64).powf(-0.5);
    let fc_std = (2.0 * width as f64).powf(-0.5);
    for i in 0..layers {
        let p = format!("{prefix}.encoder.layers.{i}");
        for proj in ["q_proj", "k_proj", "v_proj"] {
            out.push(spec(format!("{p}.self_attn.{proj}.weight"), &[width, width], Init::Normal(attn_std)));
            out.push(spec(format!("{p}.self_attn.{proj}.bias"), &[width], Init::Zeros));
        }
        out.push(spec(format!("{p}.self_attn.out_proj.weight"), &[width, width], Init::Normal(proj_std)));
        out.push(spec(format!("{p}.self_attn.out_proj.bias"), &[width], Init::Zeros));
        for ln in ["layer_norm1", "layer_norm2"] {
            out.push(spec(format!("{p}.{ln}.weight"), &[width], Init::Ones));
            out.push(spec(format!("{p}.{ln}.bias"), &[width], Init::Zeros));
        }
        out.push(spec(format!("{p}.mlp.fc1.weight"), &[4 * width, width], Init::Normal(fc_std)));
        out.push(spec(format!("{p}.mlp.fc1.bias"), &[4 * width], Init::Zeros));
        out.push(spec(format!("{p}.mlp.fc2.weight"), &[width, 4 * width], Init::Normal(proj_std)));
        out.push(spec(format!("{p}.mlp.fc2.bias"), &[width], Init::Zeros));
    }
}

fn vision_specs(cfg: &BackboneConfig) -> Vec<Spec> {
    let w = cfg.vision_width;
    let p = cfg.patch_size;
    let scale = (w as f64).powf(-0.5);
    let patch_bound = 1.0 / ((3 * p * p) as f64).sqrt();
    let g = cfg.trained_grid;
    let mut out = vec![
        spec("vision_model.embeddings.class_embedding", &[w], Init::Normal(scale)),
        spec("vision_model.embeddings.patch_embedding.weight", &[w, 3, p, p], Init::Uniform(patch_bound)),
        spec("vision_model.embeddings.position_embedding.weight", &[1 + g * g, w], Init::Normal(scale)),
        spec("vision_model.pre_layrnorm.weight", &[w], Init::Ones),
        spec("vision_model.pre_layrnorm.bias", &[w], Init::Zeros),
    ];
    encoder_specs("vision_model", w, cfg.vision_layers, &mut out);
    out.push(spec("vision_model.post_layernorm.weight", &[w], Init::Ones));
    out.push(spec("vision_model.post_layernorm.bias", &[w], Init::Zeros));
    out.push(spec("visual_projection.weight", &[cfg.embed_dim, w], Init::Normal(scale)));
    out
}

fn text_specs(cfg: &BackboneConfig) -> Vec<Spec> {
    let w = cfg.text_width;
    let mut out = vec![
        spec("text_model.embeddings.token_embedding.weight", &[cfg.vocab_size, w], Init::Normal(0.02)),
        spec("text_model.embeddings.position_embedding.weight", &[cfg.context_length, w], Init::Normal(0.01)),
    ];
    encoder_specs("text_model", w, cfg.text_layers, &mut out);
    out.push(spec("text_model.final_layer_norm.weight", &[w], Init::Ones));
    out.push(spec("text_model.final_layer_norm.bias", &[w], Init::Zeros));
    out.push(spec("text_projection.weight", &[cfg.embed_dim, w], Init::Normal((w as f64).powf(-0.5))));
    out
}

fn generate(specs: Vec<Spec>, seed: u64, dtype: DType, device: &Device, table: &mut ParamTable) -> Result<()> {
    for s in specs {
        let mut rng = named_rng(seed, &s.name);
        let t = match s.init {
            Init::Normal(std) => normal_tensor(&mut rng, &s.shape, std, dtype, device)?,
            Init::Uniform(b) => uniform_tensor(&mut rng, &s.shape, b, dtype, device)?,
            Init::Ones => Tensor::ones(s.shape.as_slice(), dtype, device)?,
            Init::Zeros => Tensor::zeros(s.shape.as_slice(), dtype, device)?,
        };
        table.insert(s.name, t);
    }
    Ok(())
}

/// Seeded random weights. Each tensor draws from its own stream keyed by
/// name, so the table does not depend on generation order.
pub fn stand_in(cfg: &BackboneConfig, device: &Device) -> Result<ParamTable> {
    let dtype = cfg.precision.dtype();
    let vision_seed = match cfg.variant {
        BackboneVariant::ImagenetVitStandIn => cfg.seed ^ 0x1a6e_7e75_ee0d_0001,
        _ => cfg.seed,
    };
    let mut table = ParamTable::new();
    generate(vision_specs(cfg), vision_seed, dtype, device, &mut table)?;
    generate(text_specs(cfg), cfg.seed, dtype, device, &mut table)?;
    Ok(table)
}

/// Load and shape-check a safetensors checkpoint. Extra entries are ignored.
pub fn load(cfg: &BackboneConfig, path: &Path, device: &Device) -> Result<ParamTable> {
    let raw = candle_core::safetensors::load(path, device)?;
    let dtype = cfg.precision.dtype();
    let mut table = ParamTable::new();
    for s in vision_specs(cfg).into_iter().chain(text_specs(cfg)) {
        let t = raw
            .get(&s.name)
            .ok_or_else(|| Error::config(format!("{}: missing tensor {}", path.display(), s.name)))?;
        if t.dims() != s.shape.as_slice() {
            return Err(Error::config(format!(
                "{}: tensor {} has shape {:?}, expected {:?}",
                path.display(),
                s.name,
                t.dims(),
                s.shape
            )));
        }
        table.insert(s.name, t.to_dtype(dtype)?);
    }
    Ok(table)
}

pub fn save(table: &ParamTable, path: &Path) -> Result<()> {
    let map: std::collections::HashMap<String, Tensor> =
        table.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

/// SHA-256 over names, shapes, dtypes and raw values, in name order.
pub fn checksum(table: &ParamTable) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in table {
        hasher.update(name.as_bytes());
        hasher.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
        match t.dtype() {
            DType::F64 => {
                for v in t.flatten_all()?.to_vec1::<f64>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn parameter_count(table: &ParamTable) -> usize {
    table.values().map(|t| t.elem_count()).sum()
}
