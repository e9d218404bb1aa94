use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::records::SampleRecord;
use crate::error::{Error, Result};

fn normalize(phrase: &str) -> String {
    phrase.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Attempts at finding a replacement phrase that names nothing in the image.
const MAX_REDRAWS: usize = 1000;

/// Turn referring-expression records into the mixed text/visual training set.
///
/// With probability `q_neg` a record becomes a negative: its phrase is
/// swapped for the phrase of another record that names no object in the
/// same image, and its target becomes empty. Negatives never get a support.
/// Every other record gets a support drawn uniformly from the other records
/// sharing its phrase, or stays text-only when its phrase is unique.
pub fn build_phrasecut_plus<R: Rng + ?Sized>(
    records: &[SampleRecord],
    q_neg: f64,
    rng: &mut R,
) -> Result<Vec<SampleRecord>> {
    if records.is_empty() {
        return Err(Error::input("no records to build from"));
    }
    if !(0.0..1.0).contains(&q_neg) {
        return Err(Error::input(format!("q_neg {q_neg} outside [0, 1)")));
    }
    let mut by_phrase: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut in_image: BTreeMap<&PathBuf, BTreeSet<String>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let p = normalize(&r.phrase);
        by_phrase.entry(p.clone()).or_default().push(i);
        in_image.entry(&r.image).or_default().insert(p);
    }

    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let mut rec = r.clone();
        rec.negative = false;
        rec.support_image = None;
        rec.support_mask = None;

        if rng.gen_bool(q_neg) {
            let present = &in_image[&r.image];
            let replacement = (0..MAX_REDRAWS).find_map(|_| {
                let j = rng.gen_range(0..records.len());
                let p = &records[j].phrase;
                (j != i && !present.contains(&normalize(p))).then(|| p.clone())
            });
            match replacement {
                Some(p) => {
                    rec.phrase = p;
                    rec.negative = true;
                    out.push(rec);
                    continue;
                }
                None => tracing::warn!(record = i, "no phrase absent from the image; kept as positive"),
            }
        }

        let same = &by_phrase[&normalize(&r.phrase)];
        let others: Vec<usize> = same.iter().copied().filter(|&j| j != i).collect();
        if let Some(&j) = others.choose(rng) {
            rec.support_image = Some(records[j].image.clone());
            rec.support_mask = Some(records[j].mask.clone());
        }
        out.push(rec);
    }
    Ok(out)
}

/// Fixed prompt prefixes drawn from during training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixRegistry(pub Vec<String>);

impl Default for PrefixRegistry {
    fn default() -> Self {
        Self(
            ["", "a photo of a ", "a photograph of a ", "an image of a "]
                .map(String::from)
                .to_vec(),
        )
    }
}

impl PrefixRegistry {
    pub fn identity() -> Self {
        Self(vec![String::new()])
    }
}

/// Prepend one prefix chosen uniformly from `prefixes`.
pub fn augment_phrase<R: Rng + ?Sized>(phrase: &str, prefixes: &PrefixRegistry, rng: &mut R) -> String {
    match prefixes.0.choose(rng) {
        Some(prefix) => format!("{prefix}{phrase}"),
        None => phrase.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn recs() -> Vec<SampleRecord> {
        vec![
            SampleRecord::new("a.png", "red circle", "a0.png"),
            SampleRecord::new("a.png", "blue square", "a1.png"),
            SampleRecord::new("b.png", "red circle", "b0.png"),
            SampleRecord::new("c.png", "green star", "c0.png"),
        ]
    }

    #[test]
    fn without_negatives_every_repeated_phrase_gets_a_support() {
        let out = build_phrasecut_plus(&recs(), 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.iter().all(|r| !r.negative));
        assert_eq!(out[0].support_image.as_deref(), Some(std::path::Path::new("b.png")));
        assert_eq!(out[2].support_mask.as_deref(), Some(std::path::Path::new("a0.png")));
        assert!(!out[1].has_support());
        assert!(!out[3].has_support());
    }

    #[test]
    fn negatives_name_absent_objects() {
        let out = build_phrasecut_plus(&recs(), 0.9, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (r, o) in recs().iter().zip(&out) {
            if o.negative {
                assert!(!o.has_support());
                let present: Vec<_> = recs().iter().filter(|x| x.image == r.image).map(|x| x.phrase.clone()).collect();
                assert!(!present.contains(&o.phrase), "{o:?}");
            }
        }
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_phrasecut_plus(&[], 0.1, &mut rng).is_err());
        assert!(build_phrasecut_plus(&recs(), 1.0, &mut rng).is_err());
    }

    #[test]
    fn prefixes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_phrase("dog", &PrefixRegistry::identity(), &mut rng), "dog");
        let reg = PrefixRegistry(vec!["a photo of a ".into()]);
        assert_eq!(augment_phrase("dog", &reg, &mut rng), "a photo of a dog");
        let a: Vec<String> = (0..20)
            .map(|_| augment_phrase("x", &PrefixRegistry::default(), &mut ChaCha8Rng::seed_from_u64(9)))
            .collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }
}
