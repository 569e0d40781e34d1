//! Prompt encoders: geometric (points, boxes, masks) and image-text.

pub mod geometric;
pub mod imagetext;
mod tokenizer;

pub use geometric::{BoxPrompt, GeometricEmbeddings, GeometricPromptEncoder, PointLabel, PointPrompt};
pub use imagetext::{AlignedEmbeddings, CrossFusion, FusedPromptTokens, ImageTextPromptEncoder};
pub use tokenizer::Tokenizer;

/// The text prompt template for a named target structure.
pub fn prompt_text_for(name: &str) -> String {
    format!("segment the {name}")
}
