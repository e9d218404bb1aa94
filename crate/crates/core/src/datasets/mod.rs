//! Dataset construction: referring-expression records with visual supports
//! and negatives, unseen-class filtering, generalized-prompt subsets and a
//! synthetic shapes set.

pub mod affordances;
pub mod classes;
pub mod crop;
pub mod phrasecut_plus;
pub mod records;
pub mod synth;

pub use affordances::{affordance_subsets, AffordanceItem, AffordanceMapping};
pub use classes::{filter_unseen_classes, vendored_hyponyms, ClassRemovalList, PascalSplits};
pub use crop::{choose_crop_window, object_aware_crop, CropConfig};
pub use phrasecut_plus::{augment_phrase, build_phrasecut_plus, PrefixRegistry};
pub use records::{load_target, read_jsonl, shard, write_jsonl, DataStore, FileStore, MemoryStore, SampleRecord};
pub use synth::{synth_affordance_mapping, synth_dataset, synth_folds, SynthConfig, SynthDataset};
