//! Trainable conditional segmentation head over frozen backbone readouts.
//!
//! The clipseg variant projects each readout to width `D`, FiLM-modulates
//! the first block input with the conditional vector, runs one pre-norm
//! transformer block per readout with the remaining projected readouts
//! added as skips, and expands every patch token to `P x P` logits. The
//! clip-deconv variant is the baseline: one readout, FiLM, and the same
//! token-to-patch expansion with a single scalar bias.

mod checkpoint;
mod report;

use std::collections::BTreeMap;

use candle_core::{DType, Device, IndexOp, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use report::{ParameterReport, ReportLine, REFERENCE_TOTAL};

use crate::backbone::{ActivationReadout, BackboneConfig};
use crate::error::{Error, Result};
use crate::metrics::ProbabilityMap;
use crate::nn::{named_rng, uniform_tensor, Dense, LayerNorm, SelfAttention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderVariant {
    Clipseg,
    ClipDeconv,
}

/// Which readout feeds the first block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipOrder {
    /// The last entry of the readout list (the deepest layer for an
    /// ascending list) forms the first block input; earlier entries are
    /// added before later blocks.
    #[default]
    DeepestFirst,
    /// List order: the first entry forms the first block input.
    ListOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComputePrecision {
    #[default]
    F32,
    F64,
    /// Half-precision activations; parameters stay in their own dtype and
    /// are cast inside every layer. (The CPU matmul kernels cover f16 but
    /// not bf16.)
    F16,
}

impl ComputePrecision {
    pub fn dtype(self) -> DType {
        match self {
            ComputePrecision::F32 => DType::F32,
            ComputePrecision::F64 => DType::F64,
            ComputePrecision::F16 => DType::F16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub variant: DecoderVariant,
    /// Token width `D`.
    pub width: usize,
    /// Backbone layers read out, in order. The order is part of the model.
    pub readout_layers: Vec<usize>,
    /// Number of transformer blocks; must equal the readout count for the
    /// clipseg variant.
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub vision_width: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub skip_order: SkipOrder,
    /// Storage dtype of the parameters (f32 or f64).
    #[serde(default = "default_param_dtype")]
    pub param_precision: ComputePrecision,
}

fn default_param_dtype() -> ComputePrecision {
    ComputePrecision::F32
}

impl DecoderConfig {
    /// Width 64, readouts `[3, 7, 9]`, 4 heads, MLP ratio 4.
    pub fn clipseg(backbone: &BackboneConfig) -> Self {
        Self {
            variant: DecoderVariant::Clipseg,
            width: 64,
            readout_layers: vec![3, 7, 9],
            blocks: 3,
            heads: 4,
            mlp_ratio: 4,
            patch_size: backbone.patch_size,
            vision_width: backbone.vision_width,
            embed_dim: backbone.embed_dim,
            skip_order: SkipOrder::DeepestFirst,
            param_precision: ComputePrecision::F32,
        }
    }

    /// Baseline head on the last backbone layer.
    pub fn clip_deconv(backbone: &BackboneConfig) -> Self {
        Self {
            variant: DecoderVariant::ClipDeconv,
            readout_layers: vec![backbone.num_layers() - 1],
            blocks: 0,
            ..Self::clipseg(backbone)
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_layers(mut self, layers: Vec<usize>) -> Self {
        if self.variant == DecoderVariant::Clipseg {
            self.blocks = layers.len();
        }
        self.readout_layers = layers;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("decoder width, heads, patch size and MLP ratio must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} does not divide among {} heads",
                self.width, self.heads
            )));
        }
        if self.readout_layers.is_empty() {
            return Err(Error::config("at least one readout layer is required"));
        }
        let mut seen = self.readout_layers.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.readout_layers.len() {
            return Err(Error::config("readout layers must be distinct"));
        }
        match self.variant {
            DecoderVariant::Clipseg if self.blocks != self.readout_layers.len() => Err(Error::config(format!(
                "{} readout layers but {} decoder blocks",
                self.readout_layers.len(),
                self.blocks
            ))),
            DecoderVariant::ClipDeconv if self.readout_layers.len() != 1 || self.blocks != 0 => {
                Err(Error::config("the deconv baseline takes one readout layer and no blocks"))
            }
            _ => Ok(()),
        }?;
        if matches!(self.param_precision, ComputePrecision::F16) {
            return Err(Error::config("parameters are stored in f32 or f64"));
        }
        Ok(())
    }

    /// Check that this decoder fits a backbone.
    pub fn check_backbone(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.patch_size != backbone.patch_size
            || self.vision_width != backbone.vision_width
            || self.embed_dim != backbone.embed_dim
        {
            return Err(Error::config("decoder geometry does not match the backbone"));
        }
        if let Some(&l) = self.readout_layers.iter().find(|&&l| l >= backbone.num_layers()) {
            return Err(Error::config(format!(
                "readout layer {l} out of range for a {}-layer backbone",
                backbone.num_layers()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; it covers the ordered readout list.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Readout positions in the order blocks consume them.
    pub fn feed_order(&self) -> Vec<usize> {
        let n = self.readout_layers.len();
        match self.skip_order {
            SkipOrder::DeepestFirst => (0..n).rev().collect(),
            SkipOrder::ListOrder => (0..n).collect(),
        }
    }
}

/// Conditionals as `(B, D_emb)`; a single row is broadcast over the batch.
fn conditional_input(cond: &Tensor, batch: usize) -> Result<Tensor> {
    let cond = match cond.rank() {
        1 => cond.unsqueeze(0)?,
        2 => cond.clone(),
        _ => return Err(Error::input(format!("conditionals must be (B, D), got {:?}", cond.dims()))),
    };
    match cond.dim(0)? {
        n if n == batch => Ok(cond),
        1 => Ok(cond.broadcast_as((batch, cond.dim(1)?))?.contiguous()?),
        n => Err(Error::input(format!("{n} conditionals for a batch of {batch}"))),
    }
}

/// Per-pixel logits for one query image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationLogits {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl SegmentationLogits {
    /// From a `(H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = t.dims2()?;
        let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("decoder produced non-finite logits"));
        }
        Ok(Self {
            width: w as u32,
            height: h as u32,
            values,
        })
    }

    pub fn probabilities(&self) -> Result<ProbabilityMap> {
        ProbabilityMap::from_logits(self.width, self.height, &self.values)
    }
}

#[derive(Debug)]
struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    fc1: Dense,
    fc2: Dense,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Named trainable parameters.
pub type VarTable = BTreeMap<String, Var>;

#[derive(Debug)]
pub struct Decoder {
    config: DecoderConfig,
    vars: VarTable,
    compute: ComputePrecision,
}

enum ParamInit {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Ones,
    Zeros,
}

fn param_specs(cfg: &DecoderConfig) -> Vec<(String, Vec<usize>, ParamInit)> {
    let d = cfg.width;
    let mut out = Vec::new();
    let mut linear = |name: &str, o: usize, i: usize, bias_len: usize| {
        out.push((format!("{name}.weight"), vec![o, i], ParamInit::FanIn(i)));
        out.push((format!("{name}.bias"), vec![bias_len], ParamInit::FanIn(i)));
    };
    for j in 0..cfg.readout_layers.len() {
        linear(&format!("reduces.{j}"), d, cfg.vision_width, d);
    }
    linear("film_mul", d, cfg.embed_dim, d);
    linear("film_add", d, cfg.embed_dim, d);
    for b in 0..cfg.blocks {
        let p = format!("blocks.{b}");
        for proj in ["q", "k", "v", "out"] {
            linear(&format!("{p}.attn.{proj}"), d, d, d);
        }
        linear(&format!("{p}.mlp.fc1"), d * cfg.mlp_ratio, d, d * cfg.mlp_ratio);
        linear(&format!("{p}.mlp.fc2"), d, d * cfg.mlp_ratio, d);
    }
    let pp = cfg.patch_size * cfg.patch_size;
    let head_bias = match cfg.variant {
        DecoderVariant::Clipseg => pp,
        DecoderVariant::ClipDeconv => 1,
    };
    linear("head", pp, d, head_bias);
    for b in 0..cfg.blocks {
        for ln in ["ln1", "ln2"] {
            out.push((format!("blocks.{b}.{ln}.weight"), vec![d], ParamInit::Ones));
            out.push((format!("blocks.{b}.{ln}.bias"), vec![d], ParamInit::Zeros));
        }
    }
    out
}

impl Decoder {
    /// Fresh decoder; every parameter draws from its own seeded stream.
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dtype = config.param_precision.dtype();
        let device = Device::Cpu;
        let mut vars = VarTable::new();
        for (name, shape, init) in param_specs(&config) {
            let t = match init {
                ParamInit::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    uniform_tensor(&mut named_rng(seed, &name), &shape, bound, dtype, &device)?
                }
                ParamInit::Ones => Tensor::ones(shape.as_slice(), dtype, &device)?,
                ParamInit::Zeros => Tensor::zeros(shape.as_slice(), dtype, &device)?,
            };
            vars.insert(name, Var::from_tensor(&t)?);
        }
        let compute = config.param_precision;
        Ok(Self { config, vars, compute })
    }

    /// Rebuild from stored tensors; names and shapes must match the config.
    pub fn from_tensors(config: DecoderConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let dtype = config.param_precision.dtype();
        let mut vars = VarTable::new();
        for (name, shape, _) in param_specs(&config) {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing decoder tensor {name}")))?;
            if t.dims() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "decoder tensor {name} has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
            vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        if tensors.len() != vars.len() {
            return Err(Error::Checkpoint("checkpoint holds unexpected decoder tensors".into()));
        }
        let compute = config.param_precision;
        Ok(Self { config, vars, compute })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn vars(&self) -> &VarTable {
        &self.vars
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn parameter_report(&self) -> ParameterReport {
        ParameterReport::new(&self.config, &self.vars)
    }

    pub fn set_compute_precision(&mut self, p: ComputePrecision) {
        self.compute = p;
    }

    pub fn compute_precision(&self) -> ComputePrecision {
        self.compute
    }

    /// Parameter snapshot as plain tensors (detached copies).
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    fn t(&self, name: &str) -> Tensor {
        self.vars[name].as_tensor().clone()
    }

    fn dense(&self, prefix: &str) -> Dense {
        Dense::new(self.t(&format!("{prefix}.weight")), Some(self.t(&format!("{prefix}.bias"))))
    }

    fn block(&self, b: usize) -> Block {
        let p = format!("blocks.{b}");
        let ln = |n: &str| LayerNorm {
            weight: self.t(&format!("{p}.{n}.weight")),
            bias: self.t(&format!("{p}.{n}.bias")),
            eps: 1e-5,
        };
        Block {
            ln1: ln("ln1"),
            attn: SelfAttention {
                q: self.dense(&format!("{p}.attn.q")),
                k: self.dense(&format!("{p}.attn.k")),
                v: self.dense(&format!("{p}.attn.v")),
                out: self.dense(&format!("{p}.attn.out")),
                heads: self.config.heads,
            },
            ln2: ln("ln2"),
            fc1: self.dense(&format!("{p}.mlp.fc1")),
            fc2: self.dense(&format!("{p}.mlp.fc2")),
        }
    }

    /// `gamma(c) * tokens + beta(c)` on every token, CLS included.
    /// `tokens: (B, T, D)`, `cond: (B, D_emb)`.
    pub fn film_modulate(&self, tokens: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (b, _, d) = tokens.dims3()?;
        let (cb, ce) = cond.dims2()?;
        if d != self.config.width || ce != self.config.embed_dim || cb != b {
            return Err(Error::config(format!(
                "FiLM expects tokens (B, T, {}) and conditionals (B, {}); got {:?} and {:?}",
                self.config.width,
                self.config.embed_dim,
                tokens.dims(),
                cond.dims()
            )));
        }
        let cond = cond.to_dtype(tokens.dtype())?;
        let gamma = self.dense("film_mul").forward(&cond)?.unsqueeze(1)?;
        let beta = self.dense("film_add").forward(&cond)?.unsqueeze(1)?;
        Ok(tokens.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }

    fn check_readout(&self, readout: &ActivationReadout, size: (usize, usize)) -> Result<()> {
        if readout.layer_indices != self.config.readout_layers {
            return Err(Error::config(format!(
                "decoder expects readouts {:?}, got {:?}",
                self.config.readout_layers, readout.layer_indices
            )));
        }
        let p = self.config.patch_size;
        let (gh, gw) = readout.grid;
        if (gh * p, gw * p) != size {
            return Err(Error::input(format!(
                "readout grid {gh}x{gw} does not cover a {}x{} query",
                size.0, size.1
            )));
        }
        Ok(())
    }

    /// Logits `(B, H, W)` for a batch of readouts and conditionals
    /// `(B, D_emb)`. `size` is the query `(H, W)`.
    pub fn forward(&self, readout: &ActivationReadout, cond: &Tensor, size: (usize, usize)) -> Result<Tensor> {
        self.check_readout(readout, size)?;
        let dtype = self.compute.dtype();
        let cond = conditional_input(cond, readout.batch_size())?;
        let order = self.config.feed_order();
        let project = |pos: usize| -> Result<Tensor> {
            let x = readout.layers[pos].to_dtype(dtype)?;
            Ok(self.dense(&format!("reduces.{pos}")).forward(&x)?)
        };
        let mut x = self.film_modulate(&project(order[0])?, &cond)?;
        match self.config.variant {
            DecoderVariant::Clipseg => {
                for (b, &pos) in order.iter().enumerate() {
                    if b > 0 {
                        x = (x + project(pos)?)?;
                    }
                    x = self.block(b).forward(&x)?;
                }
            }
            DecoderVariant::ClipDeconv => {}
        }
        self.head(&x, readout.grid)
    }

    /// Drop CLS, expand each patch token to `P x P` pixels and reassemble.
    fn head(&self, x: &Tensor, (gh, gw): (usize, usize)) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let p = self.config.patch_size;
        let patches = x.i((.., 1..t, ..))?;
        let w = self.t("head.weight");
        let y = patches.broadcast_matmul(&w.to_dtype(x.dtype())?.t()?)?;
        let y = y.broadcast_add(&self.t("head.bias").to_dtype(x.dtype())?)?;
        let y = y
            .reshape((b, gh, gw, p, p))?
            .permute((0, 1, 3, 2, 4))?
            .reshape((b, gh * p, gw * p))?;
        Ok(y.to_dtype(self.config.param_precision.dtype())?)
    }

    /// Convenience wrapper for one query.
    pub fn predict(
        &self,
        readout: &ActivationReadout,
        cond: &crate::conditioning::ConditionalVector,
        size: (usize, usize),
    ) -> Result<SegmentationLogits> {
        let logits = self.forward(readout, &cond.values().unsqueeze(0)?, size)?;
        SegmentationLogits::from_tensor(&logits.i(0)?)
    }

    /// Overwrite parameter values in place (used when restoring).
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::config(format!("no decoder parameter {name}")))?;
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }
}
