use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::records::SampleRecord;
use crate::error::{Error, Result};

const HYPONYMS: &str = include_str!("../../data/hyponyms.json");
const PASCAL_SPLITS: &str = include_str!("../../data/pascal_splits.json");

/// Class name to the words that refer to it or to any of its hyponyms.
/// Frozen once from a lexical database and checked in.
pub fn vendored_hyponyms() -> BTreeMap<String, Vec<String>> {
    serde_json::from_str(HYPONYMS).expect("vendored hyponym list is valid JSON")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PascalSplits {
    pub classes: Vec<String>,
    pub folds: Vec<Vec<String>>,
    pub zero_shot_unseen: Vec<String>,
    #[serde(default)]
    pub display_names: BTreeMap<String, String>,
}

impl PascalSplits {
    pub fn vendored() -> Self {
        serde_json::from_str(PASCAL_SPLITS).expect("vendored split file is valid JSON")
    }

    /// Readable class name used in prompts ("potted plant" for "pottedplant").
    pub fn display_name<'a>(&'a self, class: &'a str) -> &'a str {
        self.display_names.get(class).map(String::as_str).unwrap_or(class)
    }

    pub fn fold(&self, i: usize) -> Result<&[String]> {
        self.folds
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::config(format!("fold {i} out of range (have {})", self.folds.len())))
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn token_matches(word: &str, token: &str) -> bool {
    token == word
        || token.strip_suffix('s') == Some(word)
        || token.strip_suffix("es") == Some(word)
}

/// Words that may not appear in a training prompt, grown from seed classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRemovalList {
    pub seeds: Vec<String>,
    /// Each entry is a lowercase token sequence.
    pub invalid: BTreeSet<Vec<String>>,
}

impl ClassRemovalList {
    pub fn empty() -> Self {
        Self {
            seeds: Vec::new(),
            invalid: BTreeSet::new(),
        }
    }

    /// Close `seeds` over `hyponyms`. A seed with no entry still bans itself.
    pub fn new(seeds: &[String], hyponyms: &BTreeMap<String, Vec<String>>) -> Self {
        let mut invalid = BTreeSet::new();
        for seed in seeds {
            invalid.insert(tokens(seed));
            for w in hyponyms.get(seed).into_iter().flatten() {
                invalid.insert(tokens(w));
            }
        }
        invalid.retain(|t| !t.is_empty());
        Self {
            seeds: seeds.to_vec(),
            invalid,
        }
    }

    /// Removal list for Pascal classes, including their display names.
    pub fn pascal(seeds: &[String]) -> Self {
        let splits = PascalSplits::vendored();
        let mut list = Self::new(seeds, &vendored_hyponyms());
        for s in seeds {
            list.invalid.insert(tokens(splits.display_name(s)));
        }
        list
    }

    /// First banned word found in `phrase`, matched as a whole-word,
    /// case-insensitive token sequence. A trailing "s" or "es" on the last
    /// token counts as a plural.
    pub fn offending_word(&self, phrase: &str) -> Option<String> {
        let toks = tokens(phrase);
        self.invalid
            .iter()
            .find(|word| {
                let n = word.len();
                n <= toks.len()
                    && toks.windows(n).any(|w| {
                        w[..n - 1] == word[..n - 1] && token_matches(&word[n - 1], &w[n - 1])
                    })
            })
            .map(|w| w.join(" "))
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.offending_word(phrase).is_some()
    }
}

/// Drop every record whose phrase mentions a banned word.
pub fn filter_unseen_classes(records: &[SampleRecord], removal: &ClassRemovalList) -> Vec<SampleRecord> {
    records.iter().filter(|r| !removal.contains(&r.phrase)).cloned().collect()
}
