use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::records::{DataStore, SampleRecord};
use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

const AFFORDANCES: &str = include_str!("../../data/affordances.json");
const PROMPT_GROUPS: &str = include_str!("../../data/prompt_groups.json");

/// Generalized prompt ("sit on", "has wheels") to the object categories it covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffordanceMapping {
    pub prompts: BTreeMap<String, Vec<String>>,
    /// Prompt to its kind: affordances, attributes or meronymy.
    #[serde(default)]
    pub groups: BTreeMap<String, String>,
}

impl AffordanceMapping {
    /// The eight-prompt table shipped with the crate, keyed by LVIS names.
    pub fn vendored() -> Self {
        Self {
            prompts: serde_json::from_str(AFFORDANCES).expect("vendored affordance table is valid JSON"),
            groups: serde_json::from_str(PROMPT_GROUPS).expect("vendored prompt groups are valid JSON"),
        }
    }

    /// Read a `{prompt: [category, ...]}` file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            prompts: serde_json::from_str(&text)?,
            groups: BTreeMap::new(),
        })
    }

    pub fn group(&self, prompt: &str) -> Option<&str> {
        self.groups.get(prompt).map(String::as_str)
    }

    pub fn categories(&self) -> BTreeSet<&str> {
        self.prompts.values().flatten().map(String::as_str).collect()
    }

    /// Every mapped category must be part of `vocabulary`.
    pub fn validate(&self, vocabulary: &BTreeSet<String>) -> Result<()> {
        let unknown: Vec<String> = self
            .prompts
            .iter()
            .flat_map(|(p, cats)| {
                cats.iter()
                    .filter(|c| !vocabulary.contains(*c))
                    .map(move |c| format!("{c:?} (under {p:?})"))
            })
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("unknown categories in mapping: {}", unknown.join(", "))))
        }
    }
}

/// One evaluation image for a generalized prompt. The target is the union
/// of `masks`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffordanceItem {
    pub image: PathBuf,
    pub categories: Vec<String>,
    pub masks: Vec<PathBuf>,
}

impl AffordanceItem {
    pub fn target(&self, store: &dyn DataStore) -> Result<BinaryMask> {
        let mut masks = self.masks.iter();
        let first = masks
            .next()
            .ok_or_else(|| Error::input(format!("{} has no masks", self.image.display())))?;
        masks.try_fold(store.mask(first)?, |acc, m| acc.union(&store.mask(m)?))
    }
}

/// Evaluation sets keyed by generalized prompt. Images holding none of a
/// prompt's categories are left out of that prompt's set. Records without a
/// category or marked negative are ignored.
pub fn affordance_subsets(
    records: &[SampleRecord],
    mapping: &AffordanceMapping,
    vocabulary: &BTreeSet<String>,
) -> Result<BTreeMap<String, Vec<AffordanceItem>>> {
    mapping.validate(vocabulary)?;
    let mut by_image: BTreeMap<&Path, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.negative && r.category.is_some()) {
        by_image.entry(&r.image).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (prompt, cats) in &mapping.prompts {
        let wanted: BTreeSet<&str> = cats.iter().map(String::as_str).collect();
        let items: Vec<AffordanceItem> = by_image
            .iter()
            .filter_map(|(image, recs)| {
                let hits: Vec<&&SampleRecord> = recs
                    .iter()
                    .filter(|r| wanted.contains(r.category.as_deref().unwrap_or_default()))
                    .collect();
                if hits.is_empty() {
                    return None;
                }
                let mut categories: Vec<String> = hits.iter().filter_map(|r| r.category.clone()).collect();
                categories.sort();
                categories.dedup();
                let mut masks: Vec<PathBuf> = hits.iter().map(|r| r.mask.clone()).collect();
                masks.sort();
                masks.dedup();
                Some(AffordanceItem {
                    image: image.to_path_buf(),
                    categories,
                    masks,
                })
            })
            .collect();
        out.insert(prompt.clone(), items);
    }
    Ok(out)
}
