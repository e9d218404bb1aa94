//! Command line and HTTP front ends for prompt-conditioned segmentation.

pub mod commands;
pub mod inference;
pub mod service;
#[doc(hidden)]
pub mod testing;
