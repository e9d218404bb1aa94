//! Engineered visual prompts and the alignment study used to rank them.

mod benchmark;
mod compose;
mod recipe;

pub use benchmark::{
    alignment_delta, load_bench_samples, run_prompt_benchmark, AlignmentResult, BenchSample, BenchSampleRecord,
    BenchmarkConfig, BenchmarkRow, BenchmarkTable, PromptVariant,
};
pub use compose::{compose_prompt, ComposedPrompt, CompositionConfig};
pub use recipe::{
    Color, CompositionRecipe, CompositionStep, CropContext, RecipeRegistry, DEFAULT_RECIPE, HIGHLIGHT_RECIPE,
};
