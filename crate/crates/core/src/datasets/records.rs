use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::Rgb32FImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_mask, load_rgb, save_mask, save_rgb, BinaryMask};

/// One training or evaluation sample. Paths are keys into a [`DataStore`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub phrase: String,
    /// Mask of the object the phrase originally named. A negative record
    /// keeps the path for provenance, but its target is all zeros.
    pub mask: PathBuf,
    #[serde(default)]
    pub support_image: Option<PathBuf>,
    #[serde(default)]
    pub support_mask: Option<PathBuf>,
    #[serde(default)]
    pub negative: bool,
    /// Object category, when the source dataset has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl SampleRecord {
    pub fn new(image: impl Into<PathBuf>, phrase: impl Into<String>, mask: impl Into<PathBuf>) -> Self {
        Self {
            image: image.into(),
            phrase: phrase.into(),
            mask: mask.into(),
            support_image: None,
            support_mask: None,
            negative: false,
            category: None,
        }
    }

    pub fn has_support(&self) -> bool {
        self.support_image.is_some() && self.support_mask.is_some()
    }
}

/// Source of image and mask pixels.
pub trait DataStore: Send + Sync {
    fn image(&self, key: &Path) -> Result<Rgb32FImage>;
    fn mask(&self, key: &Path) -> Result<BinaryMask>;
}

/// Files on disk, relative to a root directory.
#[derive(Debug, Clone)]
pub struct FileStore {
    pub root: PathBuf,
}

impl FileStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl DataStore for FileStore {
    fn image(&self, key: &Path) -> Result<Rgb32FImage> {
        load_rgb(&self.root.join(key))
    }

    fn mask(&self, key: &Path) -> Result<BinaryMask> {
        load_mask(&self.root.join(key))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    pub images: HashMap<PathBuf, Rgb32FImage>,
    pub masks: HashMap<PathBuf, BinaryMask>,
}

impl MemoryStore {
    /// Write every image and mask as PNG under `dir`, keyed by path.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        let ensure = |p: &Path| -> Result<PathBuf> {
            let full = dir.join(p);
            if let Some(parent) = full.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            Ok(full)
        };
        for (k, img) in &self.images {
            save_rgb(img, &ensure(k)?)?;
        }
        for (k, m) in &self.masks {
            save_mask(m, &ensure(k)?)?;
        }
        Ok(())
    }
}

impl DataStore for MemoryStore {
    fn image(&self, key: &Path) -> Result<Rgb32FImage> {
        self.images
            .get(key)
            .cloned()
            .ok_or_else(|| Error::input(format!("no image {}", key.display())))
    }

    fn mask(&self, key: &Path) -> Result<BinaryMask> {
        self.masks
            .get(key)
            .cloned()
            .ok_or_else(|| Error::input(format!("no mask {}", key.display())))
    }
}

/// Segmentation target of a record: all zeros for negatives.
pub fn load_target(store: &dyn DataStore, record: &SampleRecord, image: &Rgb32FImage) -> Result<BinaryMask> {
    if record.negative {
        return Ok(BinaryMask::empty(image.width(), image.height()));
    }
    let mask = store.mask(&record.mask)?;
    if mask.dims() != image.dimensions() {
        return Err(Error::input(format!(
            "mask {} is {:?} but its image is {:?}",
            record.mask.display(),
            mask.dims(),
            image.dimensions()
        )));
    }
    Ok(mask)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[SampleRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The `index`-th of `count` contiguous, disjoint shards.
pub fn shard<T>(items: &[T], index: usize, count: usize) -> &[T] {
    assert!(count > 0 && index < count, "shard {index} of {count}");
    let n = items.len();
    let start = n * index / count;
    let end = n * (index + 1) / count;
    &items[start..end]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_schema() {
        let mut r = SampleRecord::new("img/a.png", "red circle", "mask/a.png");
        r.support_image = Some("img/b.png".into());
        r.support_mask = Some("mask/b.png".into());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("index.jsonl");
        write_jsonl(&p, &[r.clone(), SampleRecord::new("x", "y", "z")]).unwrap();
        let back = read_jsonl(&p).unwrap();
        assert_eq!(back[0], r);
        let line = std::fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        for key in ["image", "phrase", "mask", "support_image", "support_mask", "negative"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn negatives_load_empty_targets() {
        let mut store = MemoryStore::default();
        store.masks.insert("m".into(), BinaryMask::full(4, 4));
        let img = Rgb32FImage::new(4, 4);
        let mut r = SampleRecord::new("i", "p", "m");
        assert_eq!(load_target(&store, &r, &img).unwrap().count(), 16);
        r.negative = true;
        assert!(load_target(&store, &r, &img).unwrap().is_empty());
    }

    #[test]
    fn shards_partition_the_index_range() {
        let v: Vec<usize> = (0..10).collect();
        let parts: Vec<&[usize]> = (0..3).map(|i| shard(&v, i, 3)).collect();
        assert_eq!(parts.concat(), v);
    }
}
