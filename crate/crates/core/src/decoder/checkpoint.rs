//! Decoder checkpoints: a safetensors file whose header metadata carries the
//! decoder config, its hash, the backbone identity and the parameter report.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use super::{Decoder, DecoderConfig, ParameterReport};
use crate::backbone::BackboneMetadata;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const KEY_VERSION: &str = "format_version";
const KEY_CONFIG: &str = "decoder_config";
const KEY_HASH: &str = "config_hash";
const KEY_BACKBONE: &str = "backbone";
const KEY_REPORT: &str = "parameter_report";
const KEY_EXTRA: &str = "extra";

#[derive(Debug)]
pub struct Checkpoint {
    pub decoder: Decoder,
    pub backbone: BackboneMetadata,
    pub report: ParameterReport,
    /// Free-form training details (optimizer, step count, ...).
    pub extra: BTreeMap<String, String>,
}

fn bytes_of(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

pub fn save_checkpoint(
    path: &Path,
    decoder: &Decoder,
    backbone: &BackboneMetadata,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let tensors = decoder.tensors()?;
    let raw: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let (dtype, bytes) = bytes_of(t)?;
            Ok((name.clone(), dtype, t.dims().to_vec(), bytes))
        })
        .collect::<Result<_>>()?;
    let views = raw
        .iter()
        .map(|(name, dtype, shape, bytes)| Ok((name.as_str(), TensorView::new(*dtype, shape.clone(), bytes)?)))
        .collect::<Result<Vec<_>>>()?;
    let config = decoder.config();
    let mut meta = HashMap::new();
    meta.insert(KEY_VERSION.to_string(), CHECKPOINT_FORMAT_VERSION.to_string());
    meta.insert(KEY_CONFIG.to_string(), serde_json::to_string(config)?);
    meta.insert(KEY_HASH.to_string(), config.hash());
    meta.insert(KEY_BACKBONE.to_string(), serde_json::to_string(backbone)?);
    meta.insert(KEY_REPORT.to_string(), serde_json::to_string(&decoder.parameter_report())?);
    meta.insert(KEY_EXTRA.to_string(), serde_json::to_string(extra)?);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, Some(meta), path)?;
    Ok(())
}

fn field<'a>(meta: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("metadata field {key} missing")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{}: no metadata header", path.display())))?;
    let version: u32 = field(meta, KEY_VERSION)?
        .parse()
        .map_err(|_| Error::Checkpoint("unreadable format version".into()))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let config: DecoderConfig = serde_json::from_str(field(meta, KEY_CONFIG)?)?;
    if config.hash() != field(meta, KEY_HASH)? {
        return Err(Error::Checkpoint(
            "decoder config does not match its recorded hash (readout order or geometry changed)".into(),
        ));
    }
    let backbone: BackboneMetadata = serde_json::from_str(field(meta, KEY_BACKBONE)?)?;
    let extra: BTreeMap<String, String> = match meta.get(KEY_EXTRA) {
        Some(s) => serde_json::from_str(s)?,
        None => BTreeMap::new(),
    };
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
        .into_iter()
        .collect();
    let decoder = Decoder::from_tensors(config, tensors)?;
    let report = decoder.parameter_report();
    Ok(Checkpoint {
        decoder,
        backbone,
        report,
        extra,
    })
}
