use std::collections::HashMap;
use std::sync::Mutex;

use candle_core::{DType, Device, IndexOp, Tensor};

use super::attention_mask::{apply_attention_mask, AttentionMaskPolicy};
use super::posemb::interpolate_positional_embeddings;
use super::weights::ParamTable;
use crate::error::{Error, Result};
use crate::nn::{quick_gelu, Dense, LayerNorm, SelfAttention};

const IMAGE_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const IMAGE_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

fn get(table: &ParamTable, name: &str) -> Result<Tensor> {
    table
        .get(name)
        .cloned()
        .ok_or_else(|| Error::config(format!("missing backbone tensor {name}")))
}

fn dense(table: &ParamTable, prefix: &str, bias: bool) -> Result<Dense> {
    let weight = get(table, &format!("{prefix}.weight"))?;
    let bias = if bias {
        Some(get(table, &format!("{prefix}.bias"))?)
    } else {
        None
    };
    Ok(Dense::new(weight, bias))
}

fn layer_norm(table: &ParamTable, prefix: &str) -> Result<LayerNorm> {
    Ok(LayerNorm {
        weight: get(table, &format!("{prefix}.weight"))?,
        bias: get(table, &format!("{prefix}.bias"))?,
        eps: 1e-5,
    })
}

#[derive(Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    fc1: Dense,
    fc2: Dense,
}

impl EncoderLayer {
    fn load(table: &ParamTable, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: layer_norm(table, &format!("{prefix}.layer_norm1"))?,
            attn: SelfAttention {
                q: dense(table, &format!("{prefix}.self_attn.q_proj"), true)?,
                k: dense(table, &format!("{prefix}.self_attn.k_proj"), true)?,
                v: dense(table, &format!("{prefix}.self_attn.v_proj"), true)?,
                out: dense(table, &format!("{prefix}.self_attn.out_proj"), true)?,
                heads,
            },
            ln2: layer_norm(table, &format!("{prefix}.layer_norm2"))?,
            fc1: dense(table, &format!("{prefix}.mlp.fc1"), true)?,
            fc2: dense(table, &format!("{prefix}.mlp.fc2"), true)?,
        })
    }

    fn forward(&self, x: &Tensor, hook: impl FnOnce(Tensor) -> candle_core::Result<Tensor>) -> Result<Tensor> {
        let h = self.attn.forward_with(&self.ln1.forward(x)?, hook)?;
        let x = (x + h)?;
        let h = self.fc2.forward(&quick_gelu(&self.fc1.forward(&self.ln2.forward(&x)?)?)?)?;
        Ok((x + h)?)
    }
}

/// Vision tower outputs for a batch.
pub(crate) struct VisionOutput {
    pub readouts: Vec<Tensor>,
    pub embedding: Tensor,
    pub grid: (usize, usize),
}

#[derive(Debug)]
pub(crate) struct VisionTower {
    patch: usize,
    patch_proj: Dense,
    class_embedding: Tensor,
    position_embedding: Tensor,
    pre_ln: LayerNorm,
    layers: Vec<EncoderLayer>,
    post_ln: LayerNorm,
    projection: Dense,
    pos_cache: Mutex<HashMap<(usize, usize), Tensor>>,
}

impl VisionTower {
    pub fn load(table: &ParamTable, patch: usize, layers: usize, heads: usize) -> Result<Self> {
        let conv = get(table, "vision_model.embeddings.patch_embedding.weight")?;
        let width = conv.dim(0)?;
        // A stride-P convolution over non-overlapping patches is a matmul over
        // flattened (channel, row, col) patch vectors.
        let patch_proj = Dense::new(conv.reshape((width, 3 * patch * patch))?, None);
        Ok(Self {
            patch,
            patch_proj,
            class_embedding: get(table, "vision_model.embeddings.class_embedding")?,
            position_embedding: get(table, "vision_model.embeddings.position_embedding.weight")?,
            pre_ln: layer_norm(table, "vision_model.pre_layrnorm")?,
            layers: (0..layers)
                .map(|i| EncoderLayer::load(table, &format!("vision_model.encoder.layers.{i}"), heads))
                .collect::<Result<_>>()?,
            post_ln: layer_norm(table, "vision_model.post_layernorm")?,
            projection: dense(table, "visual_projection", false)?,
            pos_cache: Mutex::new(HashMap::new()),
        })
    }

    fn positions(&self, grid: (usize, usize)) -> Result<Tensor> {
        let mut cache = self.pos_cache.lock().expect("positional cache poisoned");
        if let Some(t) = cache.get(&grid) {
            return Ok(t.clone());
        }
        let t = interpolate_positional_embeddings(&self.position_embedding, grid)?;
        cache.insert(grid, t.clone());
        Ok(t)
    }

    /// `pixels: (B, 3, H, W)` normalized; H and W already checked against P.
    pub fn forward(&self, pixels: &Tensor, readout: &[usize], policy: &AttentionMaskPolicy) -> Result<VisionOutput> {
        let (b, c, h, w) = pixels.dims4()?;
        let p = self.patch;
        let (gh, gw) = (h / p, w / p);
        let patches = pixels
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, c * p * p))?;
        let tokens = self.patch_proj.forward(&patches)?;
        let width = tokens.dim(2)?;
        let cls = self.class_embedding.reshape((1, 1, width))?.broadcast_as((b, 1, width))?;
        let x = Tensor::cat(&[&cls.contiguous()?, &tokens], 1)?;
        let x = x.broadcast_add(&self.positions((gh, gw))?.unsqueeze(0)?)?;
        let mut x = self.pre_ln.forward(&x)?;

        let mut kept: HashMap<usize, Tensor> = HashMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut err = None;
            x = layer.forward(&x, |scores| match apply_attention_mask(policy, i, &scores) {
                Ok(s) => Ok(s),
                Err(e) => {
                    err = Some(e);
                    Ok(scores)
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            if readout.contains(&i) {
                kept.insert(i, x.clone());
            }
        }
        let readouts = readout.iter().map(|i| kept[i].clone()).collect();
        let pooled = self.post_ln.forward(&x.i((.., 0, ..))?)?;
        let embedding = self.projection.forward(&pooled)?;
        Ok(VisionOutput {
            readouts,
            embedding,
            grid: (gh, gw),
        })
    }
}

/// Normalize `[0,1]` RGB images into a `(B, 3, H, W)` tensor.
pub(crate) fn pixel_tensor(images: &[&image::Rgb32FImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = images[0].dimensions();
    let mut data = Vec::with_capacity(images.len() * 3 * (w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::input("images in a batch must share one size"));
        }
        for ch in 0..3 {
            for p in img.pixels() {
                data.push(((p.0[ch] as f64) - IMAGE_MEAN[ch]) / IMAGE_STD[ch]);
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?.to_dtype(dtype)?)
}

#[derive(Debug)]
pub(crate) struct TextTower {
    token_embedding: Tensor,
    position_embedding: Tensor,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    projection: Dense,
}

impl TextTower {
    pub fn load(table: &ParamTable, layers: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            token_embedding: get(table, "text_model.embeddings.token_embedding.weight")?,
            position_embedding: get(table, "text_model.embeddings.position_embedding.weight")?,
            layers: (0..layers)
                .map(|i| EncoderLayer::load(table, &format!("text_model.encoder.layers.{i}"), heads))
                .collect::<Result<_>>()?,
            final_ln: layer_norm(table, "text_model.final_layer_norm")?,
            projection: dense(table, "text_projection", false)?,
        })
    }

    /// Ids must end with the end marker; its final hidden state is pooled.
    /// Causal attention makes the result independent of any padding, so the
    /// sequence is run at its own length.
    pub fn forward(&self, ids: &[u32]) -> Result<Tensor> {
        let t = ids.len();
        let device = self.token_embedding.device();
        let idx = Tensor::new(ids, device)?;
        let x = self.token_embedding.index_select(&idx, 0)?;
        let x = (x + self.position_embedding.i(0..t)?)?.unsqueeze(0)?;
        let dtype = x.dtype();
        let causal: Vec<f64> = (0..t * t)
            .map(|k| if k % t > k / t { f64::NEG_INFINITY } else { 0.0 })
            .collect();
        let causal = Tensor::from_vec(causal, (t, t), device)?.to_dtype(dtype)?;
        let mut x = x;
        for layer in &self.layers {
            x = layer.forward(&x, |s| s.broadcast_add(&causal))?;
        }
        let x = self.final_ln.forward(&x)?;
        let pooled = x.i((.., t - 1, ..))?;
        Ok(self.projection.forward(&pooled)?.squeeze(0)?)
    }
}
