use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::referring::resolve_threshold;
use super::{par_ordered, EvalConfig, Query, Segmenter};
use crate::conditioning::Prompt;
use crate::datasets::{DataStore, SampleRecord};
use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulator, TaskMetric};
use crate::visual_prompts::{RecipeRegistry, DEFAULT_RECIPE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// Class (or phrase) shared by support and query.
    pub class: String,
    pub support_image: PathBuf,
    pub support_mask: PathBuf,
    pub query_image: PathBuf,
    pub query_mask: PathBuf,
}

/// How records are paired into episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKey {
    Category,
    Phrase,
}

/// One episode per positive record, with a support drawn uniformly from the
/// other records sharing its key in a different image. Records with no such
/// partner are left out.
pub fn build_episodes<R: Rng + ?Sized>(records: &[SampleRecord], by: EpisodeKey, rng: &mut R) -> Vec<Episode> {
    let key = |r: &SampleRecord| match by {
        EpisodeKey::Category => r.category.clone(),
        EpisodeKey::Phrase => Some(r.phrase.clone()),
    };
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate().filter(|(_, r)| !r.negative) {
        if let Some(k) = key(r) {
            groups.entry(k).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate().filter(|(_, r)| !r.negative) {
        let Some(k) = key(r) else { continue };
        let partners: Vec<usize> = groups[&k]
            .iter()
            .copied()
            .filter(|&j| j != i && records[j].image != r.image)
            .collect();
        if let Some(&j) = partners.choose(rng) {
            out.push(Episode {
                class: k,
                support_image: records[j].image.clone(),
                support_mask: records[j].mask.clone(),
                query_image: r.image.clone(),
                query_mask: r.mask.clone(),
            });
        }
    }
    out
}

/// Conditioning source for an episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum OneShotMode {
    /// Support image composed with a recipe (id or expression).
    Visual { recipe: String },
    /// The class name as text, ignoring the support.
    Text,
}

impl Default for OneShotMode {
    fn default() -> Self {
        OneShotMode::Visual {
            recipe: DEFAULT_RECIPE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneShotReport {
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "IoU_FG")]
    pub iou_fg: f64,
    #[serde(rename = "IoU_BIN")]
    pub iou_bin: f64,
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    pub threshold: f64,
    pub n_episodes: usize,
    /// Episodes dropped because their support mask was empty.
    pub skipped: usize,
}

/// One-shot segmentation. mIoU averages per-class foreground IoU; episodes
/// whose support mask is empty are skipped and counted.
pub fn eval_one_shot(
    seg: &dyn Segmenter,
    store: &dyn DataStore,
    episodes: &[Episode],
    mode: &OneShotMode,
    cfg: &EvalConfig,
) -> Result<OneShotReport> {
    if episodes.is_empty() {
        return Err(Error::input("no episodes to evaluate"));
    }
    let recipe = match mode {
        OneShotMode::Visual { recipe } => Some(RecipeRegistry::default().resolve(recipe)?),
        OneShotMode::Text => None,
    };
    let mut acc = MetricAccumulator::default();
    let mut skipped = 0;
    par_ordered(
        episodes,
        |i, e| {
            let query = cfg.fit_image(&store.image(&e.query_image)?);
            let gt = cfg.fit_mask(&store.mask(&e.query_mask)?);
            let prompt = match &recipe {
                Some(recipe) => {
                    let mask = cfg.fit_mask(&store.mask(&e.support_mask)?);
                    if mask.is_empty() {
                        return Ok(None);
                    }
                    Prompt::Visual {
                        image: cfg.fit_image(&store.image(&e.support_image)?),
                        mask,
                        recipe: recipe.clone(),
                    }
                }
                None => Prompt::Text(cfg.prompt_text(&e.class)),
            };
            let id = format!("{i:08}");
            match seg.probabilities(&Query {
                id: &id,
                image: &query,
                prompt: &prompt,
            }) {
                Ok(p) => Ok(Some((e.class.clone(), p, gt))),
                Err(Error::DegenerateMask(_)) => Ok(None),
                Err(e) => Err(e),
            }
        },
        |r| {
            match r {
                Some((class, probs, gt)) => acc.accumulate(&class, &probs, &gt)?,
                None => skipped += 1,
            }
            Ok(())
        },
    )?;
    if acc.n_images == 0 {
        return Err(Error::input(format!("all {skipped} episodes had degenerate supports")));
    }
    let t = resolve_threshold(&acc, cfg.threshold)?;
    let idx = acc.iou.index_of(t)?;
    let value = |m| acc.iou.value_at(m, idx).unwrap_or(0.0);
    Ok(OneShotReport {
        miou: value(TaskMetric::Miou),
        iou_fg: value(TaskMetric::IouFg),
        iou_bin: value(TaskMetric::IouBin),
        ap: acc.ap.finalize(),
        threshold: t,
        n_episodes: episodes.len(),
        skipped,
    })
}
