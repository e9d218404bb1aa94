use serde::{Deserialize, Serialize};

use super::{par_ordered, EvalConfig, Query, Segmenter, Threshold};
use crate::conditioning::Prompt;
use crate::datasets::{load_target, DataStore, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulator, TaskMetric};

/// Per-sample outcome kept for breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetric {
    pub id: String,
    pub phrase: String,
    pub template: String,
    pub category: Option<String>,
    pub negative: bool,
    /// Ground-truth foreground fraction of the (resized) target.
    pub fg_fraction: f64,
    /// Foreground IoU at the report threshold.
    pub iou_fg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferringReport {
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "IoU_FG")]
    pub iou_fg: f64,
    #[serde(rename = "IoU_BIN")]
    pub iou_bin: f64,
    /// `None` when the stream holds no foreground pixel.
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    pub threshold: f64,
    pub n_images: u64,
    pub n_pixels: u64,
    pub n_negatives: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub samples: Vec<SampleMetric>,
}

pub(crate) fn key(i: usize) -> String {
    format!("{i:08}")
}

/// Resolve a threshold against an accumulator, checking it is on the grid.
pub(crate) fn resolve_threshold(acc: &MetricAccumulator, t: Threshold) -> Result<f64> {
    match t {
        Threshold::Fixed(t) => {
            acc.iou.index_of(t)?;
            Ok(t)
        }
        Threshold::Best => acc
            .iou
            .best_threshold(TaskMetric::Miou)
            .ok_or_else(|| Error::input("cannot pick a threshold from an empty stream")),
    }
}

/// Referring-expression segmentation over a record stream, negatives
/// included. mIoU averages per-sample foreground IoU; IoU_FG and IoU_BIN
/// pool counts over the stream; AP pools pixels.
pub fn eval_referring(
    seg: &dyn Segmenter,
    store: &dyn DataStore,
    records: &[SampleRecord],
    cfg: &EvalConfig,
) -> Result<ReferringReport> {
    if records.is_empty() {
        return Err(Error::input("no records to evaluate"));
    }
    let mut acc = MetricAccumulator::default();
    let mut partial = Vec::with_capacity(records.len());
    par_ordered(
        records,
        |i, r| {
            let image = store.image(&r.image)?;
            let gt = cfg.fit_mask(&load_target(store, r, &image)?);
            let image = cfg.fit_image(&image);
            let prompt = Prompt::Text(cfg.prompt_text(&r.phrase));
            let id = key(i);
            let probs = seg.probabilities(&Query {
                id: &id,
                image: &image,
                prompt: &prompt,
            })?;
            Ok((id, probs, gt))
        },
        |(id, probs, gt)| {
            acc.accumulate(&id, &probs, &gt)?;
            partial.push((id, gt.fraction()));
            Ok(())
        },
    )?;

    let t = resolve_threshold(&acc, cfg.threshold)?;
    let idx = acc.iou.index_of(t)?;
    let samples = records
        .iter()
        .zip(&partial)
        .map(|(r, (id, frac))| SampleMetric {
            id: id.clone(),
            phrase: r.phrase.clone(),
            template: cfg.template.clone(),
            category: r.category.clone(),
            negative: r.negative,
            fg_fraction: *frac,
            iou_fg: acc.iou.key_iou(id, idx).unwrap_or(0.0),
        })
        .collect();
    let value = |m| acc.iou.value_at(m, idx).unwrap_or(0.0);
    Ok(ReferringReport {
        miou: value(TaskMetric::Miou),
        iou_fg: value(TaskMetric::IouFg),
        iou_bin: value(TaskMetric::IouBin),
        ap: acc.ap.finalize(),
        threshold: t,
        n_images: acc.n_images,
        n_pixels: acc.n_pixels,
        n_negatives: records.iter().filter(|r| r.negative).count(),
        samples,
    })
}
