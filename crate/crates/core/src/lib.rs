//! Promptable medical image segmentation.
//!
//! A ViT encoder with a multi-layer neck produces the image embedding;
//! points, boxes and masks are encoded geometrically; a text prompt is
//! fused with the image through a dual encoder and cross-attention; a
//! two-way attention decoder turns all of it into mask logits.
//!
//! The crate also carries the data pipeline (volume slicing, compressed
//! archives, a synthetic shapes set), the Dice+BCE training loop, gradient
//! checks, evaluation and the ablation harness.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod prompt;
pub mod train;

pub use config::{Ablation, ExperimentConfig};
pub use error::{Error, Result};
pub use model::{MaskLogits, OmtSam, PromptBundle, Segmentation};
