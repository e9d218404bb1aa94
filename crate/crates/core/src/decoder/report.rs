use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{DecoderConfig, DecoderVariant, VarTable};

/// Trainable-parameter total published for the reference model at `D = 64`
/// (ViT-B/16 backbone, three readouts).
pub const REFERENCE_TOTAL: usize = 1_122_305;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportLine {
    pub submodule: String,
    pub count: usize,
}

/// One submodule's share of the gap to the reference total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribution {
    pub submodule: String,
    pub ours: usize,
    pub reference: usize,
    pub delta: i64,
    /// Design decision the difference comes from, if any.
    pub cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub lines: Vec<ReportLine>,
    pub total: usize,
    /// Present only for the reference geometry.
    pub reference_total: Option<usize>,
    pub attribution: Vec<Attribution>,
}

fn submodule(name: &str) -> &'static str {
    if name.starts_with("reduces.") {
        "readout projections"
    } else if name.starts_with("film_") {
        "film"
    } else if name.starts_with("blocks.") {
        "blocks"
    } else {
        "output head"
    }
}

const ORDER: [&str; 4] = ["readout projections", "film", "blocks", "output head"];

fn is_reference_geometry(cfg: &DecoderConfig) -> bool {
    cfg.variant == DecoderVariant::Clipseg
        && cfg.width == 64
        && cfg.readout_layers.len() == 3
        && cfg.patch_size == 16
        && cfg.vision_width == 768
        && cfg.embed_dim == 512
}

impl ParameterReport {
    pub fn new(cfg: &DecoderConfig, vars: &VarTable) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (name, v) in vars {
            *counts.entry(submodule(name)).or_default() += v.elem_count();
        }
        let lines: Vec<ReportLine> = ORDER
            .iter()
            .filter_map(|s| {
                counts.get(s).map(|&count| ReportLine {
                    submodule: s.to_string(),
                    count,
                })
            })
            .collect();
        let total = lines.iter().map(|l| l.count).sum();
        let (reference_total, attribution) = if is_reference_geometry(cfg) {
            (Some(REFERENCE_TOTAL), attribute(cfg, &counts))
        } else {
            (None, Vec::new())
        };
        Self {
            lines,
            total,
            reference_total,
            attribution,
        }
    }

    pub fn count(&self, submodule: &str) -> Option<usize> {
        self.lines.iter().find(|l| l.submodule == submodule).map(|l| l.count)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let _ = writeln!(out, "{:<22}{:>12}", l.submodule, l.count);
        }
        let _ = writeln!(out, "{:<22}{:>12}", "total", self.total);
        if let Some(r) = self.reference_total {
            let _ = writeln!(out, "{:<22}{:>12}  (delta {:+})", "reference", r, self.total as i64 - r as i64);
            for a in self.attribution.iter().filter(|a| a.delta != 0) {
                let _ = writeln!(
                    out,
                    "  {:<20}{:>+12}  {}",
                    a.submodule,
                    a.delta,
                    a.cause.as_deref().unwrap_or("")
                );
            }
        }
        out
    }
}

/// Split the gap to the reference total by submodule. Readout projections
/// and FiLM are plain linear maps whose size follows from the geometry. The
/// reference head is a stride-`P` transposed convolution to one channel
/// (`D * P^2` weights and a scalar bias). The blocks get whatever remains
/// of the reference total.
fn attribute(cfg: &DecoderConfig, ours: &BTreeMap<&str, usize>) -> Vec<Attribution> {
    let d = cfg.width;
    let pp = cfg.patch_size * cfg.patch_size;
    let readouts = cfg.readout_layers.len() * (cfg.vision_width * d + d);
    let film = 2 * (cfg.embed_dim * d + d);
    let head = d * pp + 1;
    let blocks = REFERENCE_TOTAL - readouts - film - head;
    let reference = [
        ("readout projections", readouts, None),
        ("film", film, None),
        ("blocks", blocks, Some("4 heads, MLP ratio 4, pre-norm blocks")),
        ("output head", head, Some("per-patch linear head with one bias per output pixel")),
    ];
    reference
        .into_iter()
        .map(|(name, r, cause)| {
            let o = ours.get(name).copied().unwrap_or(0);
            let delta = o as i64 - r as i64;
            Attribution {
                submodule: name.to_string(),
                ours: o,
                reference: r,
                delta,
                cause: (delta != 0).then(|| cause.unwrap_or("unattributed").to_string()),
            }
        })
        .collect()
}
