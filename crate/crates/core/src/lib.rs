//! Prompt-conditioned binary image segmentation over a frozen dual-encoder
//! backbone: text or visual prompts in, per-pixel logits out.

pub mod backbone;
pub mod conditioning;
pub mod datasets;
pub mod decoder;
pub mod error;
pub mod evalharness;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod training;
pub mod visual_prompts;

pub use error::{Error, Result};
