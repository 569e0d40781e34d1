//! JSON request and response bodies.

use serde::{Deserialize, Serialize};

use omtsam_core::prompt::PointLabel;

use crate::rle::Rle;

/// Inline image: base64 of little-endian `f32` pixels in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineImage {
    pub width: usize,
    pub height: usize,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceRef {
    pub dataset: String,
    pub slice_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    Inline(InlineImage),
    Slice(SliceRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WirePoint {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub image_ref: ImageRef,
    #[serde(default)]
    pub points: Vec<WirePoint>,
    #[serde(default)]
    pub boxes: Vec<WireBox>,
    #[serde(default)]
    pub text: Option<String>,
    /// Logit threshold; the checkpoint's configured threshold when absent.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Permits a request with no prompt at all.
    #[serde(default)]
    pub allow_silent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub checkpoint_id: String,
    pub ablation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: Rle,
    pub dsc_vs_reference: Option<f64>,
    pub model_info: ModelSummary,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub checkpoint_id: String,
    pub config_hash: String,
    pub ablation: String,
    pub image_size: usize,
    pub supported_prompts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub id: String,
    pub organ: String,
    pub split: String,
    pub has_ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePage {
    pub dataset: String,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<SliceSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceDetail {
    pub id: String,
    pub dataset: String,
    pub organ: String,
    pub split: String,
    pub text_prompt: String,
    pub image: InlineImage,
    pub has_ground_truth: bool,
    pub ground_truth: Option<Rle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReloadRequest {
    pub checkpoint: std::path::PathBuf,
}
