use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::referring::SampleMetric;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    /// No foreground at all (negatives).
    Empty,
    /// Under 5% of the image.
    Small,
    /// 5% to 15%.
    Medium,
    Large,
}

impl SizeBucket {
    pub fn of(fraction: f64) -> Self {
        if fraction <= 0.0 {
            SizeBucket::Empty
        } else if fraction < 0.05 {
            SizeBucket::Small
        } else if fraction < 0.15 {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

impl fmt::Display for SizeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeBucket::Empty => "empty",
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakdownKey {
    ObjectSize,
    PromptTemplate,
    Class,
}

impl FromStr for BreakdownKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "size" | "object_size" | "object-size" => Ok(BreakdownKey::ObjectSize),
            "template" | "prompt_template" | "prompt-template" => Ok(BreakdownKey::PromptTemplate),
            "class" | "category" => Ok(BreakdownKey::Class),
            _ => Err(Error::input(format!(
                "unknown breakdown key {s:?} (expected size, template or class)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub count: usize,
    /// Mean per-sample foreground IoU in the group.
    pub mean_iou: f64,
}

/// Group per-sample results and average foreground IoU within each group.
/// Samples without a class are grouped under "(none)".
pub fn breakdown(samples: &[SampleMetric], key: BreakdownKey) -> Vec<GroupRow> {
    let mut groups: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for s in samples {
        let g = match key {
            BreakdownKey::ObjectSize => SizeBucket::of(s.fg_fraction).to_string(),
            BreakdownKey::PromptTemplate => s.template.clone(),
            BreakdownKey::Class => s.category.clone().unwrap_or_else(|| "(none)".into()),
        };
        let e = groups.entry(g).or_default();
        e.0 += 1;
        e.1 += s.iou_fg;
    }
    groups
        .into_iter()
        .map(|(group, (count, sum))| GroupRow {
            group,
            count,
            mean_iou: sum / count as f64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{load_target, synth_dataset, DataStore, SynthConfig};
    use crate::evalharness::oracle::Lookup;
    use crate::evalharness::referring::key;
    use crate::evalharness::{eval_referring, EvalConfig};
    use crate::metrics::ProbabilityMap;

    fn sample(iou: f64, frac: f64, cat: &str) -> SampleMetric {
        SampleMetric {
            id: String::new(),
            phrase: String::new(),
            template: "{}".into(),
            category: Some(cat.into()),
            negative: false,
            fg_fraction: frac,
            iou_fg: iou,
        }
    }

    #[test]
    fn one_group_equals_the_global_mean() {
        let s = vec![sample(0.2, 0.1, "a"), sample(0.6, 0.1, "a"), sample(1.0, 0.1, "a")];
        let rows = breakdown(&s, BreakdownKey::Class);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mean_iou - 0.6).abs() < 1e-12);
    }

    #[test]
    fn unknown_key_is_an_input_error() {
        assert!(matches!("colour".parse::<BreakdownKey>(), Err(Error::Input(_))));
    }

    /// Box-blurred ground truth: boundary pixels lose confidence, which
    /// hurts small objects more.
    fn blurred(m: &crate::imaging::BinaryMask) -> ProbabilityMap {
        let (w, h) = m.dims();
        let r = 2i64;
        let v = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| {
                let mut on = 0;
                let mut n = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                        if xx >= 0 && yy >= 0 && xx < w as i64 && yy < h as i64 {
                            n += 1;
                            on += m.get(xx as u32, yy as u32) as u32;
                        }
                    }
                }
                on as f32 / n as f32
            })
            .collect();
        ProbabilityMap::new(w, h, v).unwrap()
    }

    #[test]
    fn larger_objects_survive_blur_better() {
        let d = synth_dataset(4, 120, &SynthConfig::default()).unwrap();
        let oracle = Lookup(
            d.records
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let img = d.store.image(&r.image).unwrap();
                    (key(i), blurred(&load_target(&d.store, r, &img).unwrap()))
                })
                .collect(),
        );
        let rep = eval_referring(&oracle, &d.store, &d.records, &EvalConfig::default()).unwrap();
        let rows = breakdown(&rep.samples, BreakdownKey::ObjectSize);
        let mean = |g: &str| rows.iter().find(|r| r.group == g).map(|r| r.mean_iou).unwrap();
        assert!(mean("large") >= mean("medium"), "{rows:?}");
        assert!(mean("medium") >= mean("small"), "{rows:?}");
    }
}
