//! Evaluation protocols: referring expressions, multi-label zero-shot,
//! one-shot, generalized prompts, per-group breakdowns and ablations.
//!
//! Every protocol runs against a [`Segmenter`], so the same code scores a
//! trained model or an oracle used in tests.

pub mod ablation;
pub mod breakdown;
pub mod generalized;
pub mod oneshot;
pub mod referring;
pub mod zeroshot;

use std::fmt;
use std::str::FromStr;

use image::Rgb32FImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{apply_delta, parse_delta, run_ablation, AblationConfig, AblationDelta, AblationRow, AblationTable};
pub use breakdown::{breakdown, BreakdownKey, GroupRow, SizeBucket};
pub use generalized::{eval_generalized, GeneralizedRow};
pub use oneshot::{build_episodes, eval_one_shot, Episode, EpisodeKey, OneShotMode, OneShotReport};
pub use referring::{eval_referring, ReferringReport, SampleMetric};
pub use zeroshot::{argmax_labels, eval_zero_shot_multilabel, multilabel_images, ClassIou, MultiLabelImage, ZeroShotReport};

use crate::conditioning::Prompt;
use crate::error::{Error, Result};
use crate::imaging::{resize_rgb, BinaryMask};
use crate::metrics::ProbabilityMap;
use crate::model::SegmentationModel;

/// One segmentation request. `id` identifies the sample for oracles.
pub struct Query<'a> {
    pub id: &'a str,
    pub image: &'a Rgb32FImage,
    pub prompt: &'a Prompt,
}

/// Anything that turns an image and a prompt into a probability map of the
/// image's size.
pub trait Segmenter: Sync {
    fn probabilities(&self, query: &Query) -> Result<ProbabilityMap>;

    /// Several prompts against one image. Models override this to encode
    /// the image once.
    fn probabilities_many(&self, id: &str, image: &Rgb32FImage, prompts: &[Prompt]) -> Result<Vec<ProbabilityMap>> {
        prompts
            .iter()
            .map(|prompt| self.probabilities(&Query { id, image, prompt }))
            .collect()
    }
}

impl Segmenter for SegmentationModel {
    fn probabilities(&self, query: &Query) -> Result<ProbabilityMap> {
        self.segment_prompt(query.image, query.prompt)?.probabilities()
    }

    fn probabilities_many(&self, _id: &str, image: &Rgb32FImage, prompts: &[Prompt]) -> Result<Vec<ProbabilityMap>> {
        let readout = self.readout(image)?;
        let size = (image.height() as usize, image.width() as usize);
        prompts
            .iter()
            .map(|p| self.decoder.predict(&readout, &self.condition(p)?, size)?.probabilities())
            .collect()
    }
}

/// Binarization threshold: fixed, or the grid value maximizing mIoU on the
/// evaluated stream itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Fixed(f64),
    Best,
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Fixed(0.5)
    }
}

impl FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "best" {
            return Ok(Threshold::Best);
        }
        s.parse::<f64>()
            .map(Threshold::Fixed)
            .map_err(|_| Error::config(format!("threshold {s:?} is neither a number nor \"best\"")))
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Fixed(t) => write!(f, "{t}"),
            Threshold::Best => f.write_str("best"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub threshold: Threshold,
    /// Square side queries and targets are resized to; unchanged when unset.
    pub image_size: Option<u32>,
    /// Text prompt template, `{}` standing for the phrase or class name.
    pub template: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: Threshold::default(),
            image_size: None,
            template: "{}".into(),
        }
    }
}

impl EvalConfig {
    pub(crate) fn fit_image(&self, img: &Rgb32FImage) -> Rgb32FImage {
        match self.image_size {
            Some(s) if img.dimensions() != (s, s) => resize_rgb(img, s, s),
            _ => img.clone(),
        }
    }

    pub(crate) fn fit_mask(&self, m: &BinaryMask) -> BinaryMask {
        match self.image_size {
            Some(s) if m.dims() != (s, s) => m.resize_nearest(s, s),
            _ => m.clone(),
        }
    }

    pub(crate) fn prompt_text(&self, phrase: &str) -> String {
        if self.template.contains("{}") {
            self.template.replace("{}", phrase)
        } else {
            format!("{}{phrase}", self.template)
        }
    }
}

/// Map `f` over `items` in parallel, in chunks, feeding results to `sink`
/// in input order so reports do not depend on the thread count.
pub(crate) fn par_ordered<T, R, F, S>(items: &[T], f: F, mut sink: S) -> Result<()>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
    S: FnMut(R) -> Result<()>,
{
    const CHUNK: usize = 64;
    for (c, chunk) in items.chunks(CHUNK).enumerate() {
        let results: Vec<Result<R>> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, item)| f(c * CHUNK + i, item))
            .collect();
        for r in results {
            sink(r?)?;
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Predictors with known outputs, keyed by query id.

    use std::collections::HashMap;

    use super::*;

    pub struct Lookup(pub HashMap<String, ProbabilityMap>);

    impl Segmenter for Lookup {
        fn probabilities(&self, q: &Query) -> Result<ProbabilityMap> {
            self.0
                .get(q.id)
                .cloned()
                .ok_or_else(|| Error::input(format!("oracle has no map for {}", q.id)))
        }
    }

    pub fn from_mask(m: &BinaryMask) -> ProbabilityMap {
        let v = m.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        ProbabilityMap::new(m.width(), m.height(), v).unwrap()
    }

    /// Probability 0 everywhere.
    pub struct Background;

    impl Segmenter for Background {
        fn probabilities(&self, q: &Query) -> Result<ProbabilityMap> {
            let (w, h) = q.image.dimensions();
            ProbabilityMap::new(w, h, vec![0.0; (w * h) as usize])
        }
    }
}
