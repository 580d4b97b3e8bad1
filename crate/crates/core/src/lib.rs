pub mod cli;
pub mod content_branch;
pub mod embeddings;
pub mod error;
pub mod geometry;
pub mod image_translation;
pub mod metrics;
pub mod nn;
pub mod renderer;
pub mod speaker_branch;
pub mod training;

pub use error::{Error, Result};
