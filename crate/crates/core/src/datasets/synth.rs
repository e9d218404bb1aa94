//! Small procedural dataset of colored shapes, used wherever real referring
//! data is unavailable: tests, desk-scale training runs and demos.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use image::{Rgb, Rgb32FImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::affordances::AffordanceMapping;
use super::records::{MemoryStore, SampleRecord};
use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

pub const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Square image side in pixels.
    pub size: u32,
    pub max_objects: usize,
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 32,
            max_objects: 3,
            shapes: SHAPES.map(String::from).to_vec(),
            colors: COLORS.map(|(c, _)| c.to_string()).to_vec(),
        }
    }
}

impl SynthConfig {
    /// Upper bound on distinct phrases.
    pub fn vocabulary_bound(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::config(format!("synthetic image side {} is below 16", self.size)));
        }
        if self.max_objects == 0 {
            return Err(Error::config("max_objects must be at least 1"));
        }
        if let Some(s) = self.shapes.iter().find(|s| !SHAPES.contains(&s.as_str())) {
            return Err(Error::config(format!("unknown shape {s:?}")));
        }
        if let Some(c) = self.colors.iter().find(|c| !COLORS.iter().any(|(n, _)| n == c)) {
            return Err(Error::config(format!("unknown color {c:?}")));
        }
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::config("shape and color lists must be nonempty"));
        }
        Ok(())
    }
}

fn inside(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        "triangle" => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        "cross" => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        _ => false,
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub records: Vec<SampleRecord>,
    pub store: MemoryStore,
}

/// `n` records over non-overlapping shapes. Each image holds up to
/// `max_objects` shapes with distinct phrases, so a phrase never names two
/// objects in one image.
pub fn synth_dataset(seed: u64, n: usize, cfg: &SynthConfig) -> Result<SynthDataset> {
    if n == 0 {
        return Err(Error::input("synthetic dataset needs at least one record"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.size;
    let mut records = Vec::with_capacity(n);
    let mut store = MemoryStore::default();
    let mut phrases: Vec<(String, String, [f32; 3])> = Vec::new();
    for c in &cfg.colors {
        let rgb = COLORS.iter().find(|(n, _)| n == c).map(|(_, v)| *v).unwrap_or([1.0; 3]);
        for s in &cfg.shapes {
            phrases.push((format!("{c} {s}"), s.clone(), rgb));
        }
    }

    let mut index = 0usize;
    while records.len() < n {
        let base: f32 = rng.gen_range(0.2..0.5);
        let mut img = Rgb32FImage::from_fn(size, size, |_, _| {
            let v = (base + rng.gen_range(-0.04..0.04f32)).clamp(0.0, 1.0);
            Rgb([v, v, v])
        });
        let k = rng.gen_range(1..=cfg.max_objects.min(phrases.len()));
        let chosen: Vec<_> = phrases.choose_multiple(&mut rng, k).cloned().collect();
        let mut occupied = BinaryMask::empty(size, size);
        let image_key = PathBuf::from(format!("images/{index:05}.png"));
        let mut placed = 0;
        for (j, (phrase, shape, rgb)) in chosen.iter().enumerate() {
            let mut mask = None;
            for _ in 0..50 {
                let r = rng.gen_range(size as f64 / 8.0..=size as f64 / 4.0);
                let cx = rng.gen_range(r..size as f64 - r);
                let cy = rng.gen_range(r..size as f64 - r);
                let m = BinaryMask::from_fn(size, size, |x, y| {
                    inside(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r)
                });
                let clear = m.as_slice().iter().zip(occupied.as_slice()).all(|(a, b)| !(*a && *b));
                if !m.is_empty() && clear {
                    mask = Some(m);
                    break;
                }
            }
            let Some(mask) = mask else { continue };
            occupied = occupied.union(&mask)?;
            for (x, y, p) in img.enumerate_pixels_mut() {
                if mask.get(x, y) {
                    *p = Rgb(*rgb);
                }
            }
            let mask_key = PathBuf::from(format!("masks/{index:05}_{j}.png"));
            store.masks.insert(mask_key.clone(), mask);
            let mut rec = SampleRecord::new(image_key.clone(), phrase.clone(), mask_key);
            rec.category = Some(shape.clone());
            records.push(rec);
            placed += 1;
        }
        if placed > 0 {
            store.images.insert(image_key, img);
        }
        index += 1;
    }
    // trim to n, dropping the store entries only the trimmed records used
    for r in records.drain(n..) {
        store.masks.remove(&r.mask);
    }
    let used: BTreeSet<&PathBuf> = records.iter().map(|r| &r.image).collect();
    store.images.retain(|k, _| used.contains(k));
    Ok(SynthDataset { records, store })
}

/// Generalized prompts over the shape vocabulary, mirroring the vendored
/// affordance table at desk scale.
pub fn synth_affordance_mapping() -> AffordanceMapping {
    let m = |cats: &[&str]| cats.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    AffordanceMapping {
        prompts: BTreeMap::from([
            ("has corners".to_string(), m(&["square", "triangle", "cross"])),
            ("is round".to_string(), m(&["circle"])),
            ("has straight edges".to_string(), m(&["square", "triangle"])),
        ]),
        groups: BTreeMap::from([
            ("has corners".to_string(), "meronymy".to_string()),
            ("is round".to_string(), "attributes".to_string()),
            ("has straight edges".to_string(), "attributes".to_string()),
        ]),
    }
}

/// Shape folds standing in for Pascal folds: one shape per fold.
pub fn synth_folds(cfg: &SynthConfig) -> Vec<Vec<String>> {
    cfg.shapes.iter().map(|s| vec![s.clone()]).collect()
}
