use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{par_ordered, EvalConfig, Segmenter};
use crate::conditioning::Prompt;
use crate::datasets::{DataStore, SampleRecord};
use crate::error::{Error, Result};
use crate::imaging::BinaryMask;
use crate::metrics::{miou, Confusion, ProbabilityMap};

/// An image with one ground-truth mask list per class present in it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiLabelImage {
    pub image: PathBuf,
    pub masks: BTreeMap<String, Vec<PathBuf>>,
}

/// Group categorized, non-negative records by image.
pub fn multilabel_images(records: &[SampleRecord]) -> Vec<MultiLabelImage> {
    let mut by_image: BTreeMap<PathBuf, BTreeMap<String, Vec<PathBuf>>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.negative) {
        if let Some(c) = &r.category {
            let masks = by_image.entry(r.image.clone()).or_default().entry(c.clone()).or_default();
            if !masks.contains(&r.mask) {
                masks.push(r.mask.clone());
            }
        }
    }
    by_image
        .into_iter()
        .map(|(image, masks)| MultiLabelImage { image, masks })
        .collect()
}

/// Per-pixel index of the most probable class; ties go to the lowest index.
pub fn argmax_labels(maps: &[ProbabilityMap]) -> Result<Vec<usize>> {
    let first = maps.first().ok_or_else(|| Error::input("no class maps"))?;
    if maps.iter().any(|m| m.dims() != first.dims()) {
        return Err(Error::input("class maps differ in size"));
    }
    Ok((0..first.values.len())
        .map(|p| {
            let mut best = 0;
            for (c, m) in maps.iter().enumerate().skip(1) {
                if m.values[p] > maps[best].values[p] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    pub seen: bool,
    /// `None` when no evaluated image contains the class.
    pub iou: Option<f64>,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    #[serde(rename = "mIoU_S")]
    pub miou_seen: Option<f64>,
    #[serde(rename = "mIoU_U")]
    pub miou_unseen: Option<f64>,
    pub per_class: Vec<ClassIou>,
    pub n_images: usize,
}

/// Multi-label segmentation from binary maps: one forward per class name,
/// then a per-pixel argmax. Pixels that belong to no ground-truth class are
/// left out of the counts, and a class is scored only on images containing
/// it. mIoU is reported separately for seen and unseen classes.
pub fn eval_zero_shot_multilabel(
    seg: &dyn Segmenter,
    store: &dyn DataStore,
    images: &[MultiLabelImage],
    classes: &[String],
    unseen: &BTreeSet<String>,
    prompt_names: &BTreeMap<String, String>,
    cfg: &EvalConfig,
) -> Result<ZeroShotReport> {
    if classes.is_empty() {
        return Err(Error::input("zero-shot evaluation needs at least one class"));
    }
    let prompts: Vec<Prompt> = classes
        .iter()
        .map(|c| Prompt::Text(cfg.prompt_text(prompt_names.get(c).unwrap_or(c))))
        .collect();
    let mut counts = vec![Confusion::default(); classes.len()];
    let mut present = vec![0usize; classes.len()];
    par_ordered(
        images,
        |i, item| {
            let image = cfg.fit_image(&store.image(&item.image)?);
            let mut gts: Vec<Option<BinaryMask>> = vec![None; classes.len()];
            for (c, name) in classes.iter().enumerate() {
                if let Some(paths) = item.masks.get(name) {
                    let mut union: Option<BinaryMask> = None;
                    for p in paths {
                        let m = cfg.fit_mask(&store.mask(p)?);
                        union = Some(match union {
                            Some(u) => u.union(&m)?,
                            None => m,
                        });
                    }
                    gts[c] = union;
                }
            }
            let maps = seg.probabilities_many(&format!("{i:08}"), &image, &prompts)?;
            let labels = argmax_labels(&maps)?;
            let n = labels.len();
            let labeled: Vec<bool> = (0..n)
                .map(|p| gts.iter().flatten().any(|g| g.as_slice()[p]))
                .collect();
            let per_class: Vec<Option<Confusion>> = gts
                .iter()
                .enumerate()
                .map(|(c, gt)| {
                    let gt = gt.as_ref()?;
                    let mut k = Confusion::default();
                    for p in (0..n).filter(|&p| labeled[p]) {
                        match (labels[p] == c, gt.as_slice()[p]) {
                            (true, true) => k.tp += 1,
                            (true, false) => k.fp += 1,
                            (false, true) => k.fn_ += 1,
                            (false, false) => k.tn += 1,
                        }
                    }
                    Some(k)
                })
                .collect();
            Ok(per_class)
        },
        |per_class| {
            for (c, k) in per_class.into_iter().enumerate() {
                if let Some(k) = k {
                    counts[c].tp += k.tp;
                    counts[c].fp += k.fp;
                    counts[c].fn_ += k.fn_;
                    counts[c].tn += k.tn;
                    present[c] += 1;
                }
            }
            Ok(())
        },
    )?;
    let per_class: Vec<ClassIou> = classes
        .iter()
        .enumerate()
        .map(|(c, name)| ClassIou {
            class: name.clone(),
            seen: !unseen.contains(name),
            iou: (present[c] > 0).then(|| counts[c].iou_fg()),
            n_images: present[c],
        })
        .collect();
    let mean = |seen: bool| {
        let v: Vec<f64> = per_class.iter().filter(|c| c.seen == seen).filter_map(|c| c.iou).collect();
        miou(&v)
    };
    Ok(ZeroShotReport {
        miou_seen: mean(true),
        miou_unseen: mean(false),
        per_class,
        n_images: images.len(),
    })
}
