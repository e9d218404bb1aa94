use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::referring::resolve_threshold;
use super::{par_ordered, EvalConfig, Query, Segmenter};
use crate::conditioning::Prompt;
use crate::datasets::{AffordanceItem, AffordanceMapping, DataStore};
use crate::error::Result;
use crate::metrics::{MetricAccumulator, TaskMetric};

/// One table row; metrics are `None` (reported as n/a) for empty subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedRow {
    pub prompt: String,
    pub group: Option<String>,
    pub n_images: usize,
    #[serde(rename = "mIoU")]
    pub miou: Option<f64>,
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    pub threshold: Option<f64>,
}

/// Score each generalized prompt against the union of its categories'
/// masks. mIoU averages per-image foreground IoU.
pub fn eval_generalized(
    seg: &dyn Segmenter,
    store: &dyn DataStore,
    subsets: &BTreeMap<String, Vec<AffordanceItem>>,
    mapping: &AffordanceMapping,
    cfg: &EvalConfig,
) -> Result<Vec<GeneralizedRow>> {
    let mut rows = Vec::with_capacity(subsets.len());
    for (prompt_name, items) in subsets {
        let group = mapping.group(prompt_name).map(str::to_string);
        if items.is_empty() {
            rows.push(GeneralizedRow {
                prompt: prompt_name.clone(),
                group,
                n_images: 0,
                miou: None,
                ap: None,
                threshold: None,
            });
            continue;
        }
        let prompt = Prompt::Text(cfg.prompt_text(prompt_name));
        let mut acc = MetricAccumulator::default();
        par_ordered(
            items,
            |i, item| {
                let image = cfg.fit_image(&store.image(&item.image)?);
                let gt = cfg.fit_mask(&item.target(store)?);
                let id = format!("{prompt_name}/{i:08}");
                let probs = seg.probabilities(&Query {
                    id: &id,
                    image: &image,
                    prompt: &prompt,
                })?;
                Ok((id, probs, gt))
            },
            |(id, probs, gt)| acc.accumulate(&id, &probs, &gt),
        )?;
        let t = resolve_threshold(&acc, cfg.threshold)?;
        let idx = acc.iou.index_of(t)?;
        rows.push(GeneralizedRow {
            prompt: prompt_name.clone(),
            group,
            n_images: items.len(),
            miou: acc.iou.value_at(TaskMetric::Miou, idx),
            ap: acc.ap.finalize(),
            threshold: Some(t),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::MemoryStore;
    use crate::evalharness::oracle::from_mask;
    use crate::imaging::BinaryMask;
    use crate::metrics::ProbabilityMap;
    use image::Rgb32FImage;

    struct Everything;

    impl Segmenter for Everything {
        fn probabilities(&self, q: &Query) -> Result<ProbabilityMap> {
            let (w, h) = q.image.dimensions();
            Ok(from_mask(&BinaryMask::full(w, h)))
        }
    }

    #[test]
    fn whole_frame_target_scores_one_and_empty_subsets_are_na() {
        let mut store = MemoryStore::default();
        store.images.insert("i".into(), Rgb32FImage::new(4, 4));
        store.masks.insert("m".into(), BinaryMask::full(4, 4));
        let subsets = BTreeMap::from([
            (
                "sit on".to_string(),
                vec![AffordanceItem {
                    image: "i".into(),
                    categories: vec!["sofa".into()],
                    masks: vec!["m".into()],
                }],
            ),
            ("can fly".to_string(), vec![]),
        ]);
        let rows = eval_generalized(
            &Everything,
            &store,
            &subsets,
            &AffordanceMapping::vendored(),
            &EvalConfig::default(),
        )
        .unwrap();
        let fly = rows.iter().find(|r| r.prompt == "can fly").unwrap();
        assert_eq!((fly.miou, fly.ap), (None, None));
        let sit = rows.iter().find(|r| r.prompt == "sit on").unwrap();
        assert_eq!(sit.miou, Some(1.0));
        assert_eq!(sit.group.as_deref(), Some("affordances"));
    }
}
