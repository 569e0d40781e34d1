//! HTTP inference service for promptable segmentation.
//!
//! All endpoints live under `/v1`. Masks travel as row-major run-length
//! encodings ([`rle`]); inline images as base64 little-endian `f32` pixels.
//! The service never trains and keeps no per-client state.

pub mod api;
pub mod error;
pub mod rle;
mod state;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderValue, Method};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::Array2;
use serde::de::DeserializeOwned;
use tower_http::cors::{AllowOrigin, CorsLayer};

use omtsam_core::prompt::{BoxPrompt, PointPrompt};
use omtsam_core::PromptBundle;

use crate::api::*;
pub use crate::error::{ApiError, ErrorBody};
pub use crate::state::{AppState, Dataset, LoadedModel};

const BODY_LIMIT: usize = 64 * 1024 * 1024;
pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 1000;

pub fn router(state: AppState, cors_origins: &[String]) -> Router {
    let origins: Vec<HeaderValue> = cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Router::new()
        .route("/v1/segment", post(segment))
        .route("/v1/slices", get(list_slices))
        .route("/v1/slices/{id}", get(get_slice))
        .route("/v1/model", get(model_info))
        .route("/v1/admin/reload", post(reload))
        .fallback(|| async { ApiError::NotFound("no such endpoint".into()) })
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .layer(cors)
        .with_state(state)
}

/// Serves `router` on `addr` until the process is stopped.
pub async fn serve(app: Router, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::Invalid {
        field: None,
        message: format!("malformed request body: {e}"),
    })
}

fn decode_image(img: &InlineImage) -> Result<Array2<f32>, ApiError> {
    let bytes = BASE64
        .decode(img.data.as_bytes())
        .map_err(|e| ApiError::invalid("image_ref.inline.data", format!("invalid base64: {e}")))?;
    let n = img.width * img.height;
    if n == 0 || bytes.len() != 4 * n {
        return Err(ApiError::invalid(
            "image_ref.inline.data",
            format!("{} bytes do not hold {}x{} f32 pixels", bytes.len(), img.width, img.height),
        ));
    }
    let pixels: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::invalid("image_ref.inline.data", "pixels must be finite"));
    }
    Ok(Array2::from_shape_vec((img.height, img.width), pixels).expect("length checked above"))
}

pub fn encode_image(image: &Array2<f32>) -> InlineImage {
    let bytes: Vec<u8> = image.iter().flat_map(|v| v.to_le_bytes()).collect();
    InlineImage {
        width: image.ncols(),
        height: image.nrows(),
        data: BASE64.encode(bytes),
    }
}

fn prompt_bundle(req: &SegmentRequest, h: usize, w: usize) -> Result<PromptBundle, ApiError> {
    let indexed = |field: &str, i: usize, e: omtsam_core::Error| match ApiError::from(e) {
        ApiError::Invalid { message, .. } => ApiError::invalid(format!("{field}[{i}]"), message),
        other => other,
    };
    let mut bundle = PromptBundle::default();
    for (i, p) in req.points.iter().enumerate() {
        let point = PointPrompt::new(p.x, p.y, p.label);
        point.validate(h, w).map_err(|e| indexed("points", i, e))?;
        bundle.points.push(point);
    }
    for (i, b) in req.boxes.iter().enumerate() {
        let bx = BoxPrompt::new(b.x0, b.y0, b.x1, b.y1).map_err(|e| indexed("boxes", i, e))?;
        bx.validate(h, w).map_err(|e| indexed("boxes", i, e))?;
        bundle.boxes.push(bx);
    }
    if let Some(t) = &req.text {
        if t.trim().is_empty() {
            return Err(ApiError::invalid("text", "prompt text is empty"));
        }
        bundle.text = Some(t.clone());
    }
    if !bundle.has_geometry() && bundle.text.is_none() && !req.allow_silent {
        return Err(ApiError::invalid(
            "prompts",
            "give at least one point, box or text prompt, or set allow_silent",
        ));
    }
    Ok(bundle)
}

async fn segment(State(state): State<AppState>, body: Bytes) -> Result<Json<SegmentResponse>, ApiError> {
    let req: SegmentRequest = parse_json(&body)?;
    let loaded = state.model()?;
    let start = Instant::now();
    let (image, reference) = match &req.image_ref {
        ImageRef::Inline(img) => (decode_image(img)?, None),
        ImageRef::Slice(r) => {
            let ds = state.dataset(&r.dataset)?;
            let entry = ds
                .entry(&r.slice_id)
                .ok_or_else(|| ApiError::NotFound(format!("unknown slice `{}` in `{}`", r.slice_id, r.dataset)))?;
            let sample = ds.read(entry).map_err(|e| ApiError::Internal(e.to_string()))?;
            (sample.image, Some(sample.mask))
        }
    };
    let (h, w) = image.dim();
    let prompt = prompt_bundle(&req, h, w)?;
    let threshold = match req.threshold {
        Some(t) if !t.is_finite() => return Err(ApiError::invalid("threshold", "threshold must be finite")),
        Some(t) => t,
        None => loaded.model.config().metrics.logit_threshold,
    };
    let worker = loaded.clone();
    let seg = tokio::task::spawn_blocking(move || worker.model.segment(&image, &prompt, threshold as f32))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    let dsc_vs_reference = match reference {
        Some(gt) => Some(omtsam_metrics::dsc(seg.mask.view(), gt.view()).map_err(|e| ApiError::Internal(e.to_string()))?),
        None => None,
    };
    Ok(Json(SegmentResponse {
        mask: rle::encode(&seg.mask),
        dsc_vs_reference,
        model_info: ModelSummary {
            checkpoint_id: loaded.meta.checkpoint_id(),
            ablation: loaded.meta.config.train.ablation.to_string(),
        },
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

fn query_usize(q: &HashMap<String, String>, key: &str, default: usize) -> Result<usize, ApiError> {
    match q.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::invalid(key, format!("`{v}` is not a non-negative integer"))),
    }
}

fn dataset_param(q: &HashMap<String, String>) -> Result<&str, ApiError> {
    q.get("dataset")
        .map(String::as_str)
        .ok_or_else(|| ApiError::invalid("dataset", "the `dataset` query parameter is required"))
}

async fn list_slices(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<SlicePage>, ApiError> {
    let id = dataset_param(&q)?;
    let offset = query_usize(&q, "offset", 0)?;
    let limit = query_usize(&q, "limit", DEFAULT_PAGE)?;
    if limit == 0 || limit > MAX_PAGE {
        return Err(ApiError::invalid("limit", format!("limit must be in 1..={MAX_PAGE}")));
    }
    let ds = state.dataset(id)?;
    let items = ds
        .entries()
        .iter()
        .skip(offset)
        .take(limit)
        .map(|e| SliceSummary {
            id: e.id(),
            organ: e.organ_name.clone(),
            split: e.split.to_string(),
            has_ground_truth: true,
        })
        .collect();
    Ok(Json(SlicePage {
        dataset: id.to_string(),
        total: ds.len(),
        offset,
        limit,
        items,
    }))
}

async fn get_slice(
    State(state): State<AppState>,
    Path(slice_id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<SliceDetail>, ApiError> {
    let id = dataset_param(&q)?;
    let ds = state.dataset(id)?;
    let entry = ds
        .entry(&slice_id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown slice `{slice_id}` in `{id}`")))?;
    let sample = ds.read(entry).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(SliceDetail {
        id: slice_id,
        dataset: id.to_string(),
        organ: sample.organ_name.clone(),
        split: entry.split.to_string(),
        text_prompt: sample.text_prompt.clone(),
        image: encode_image(&sample.image),
        has_ground_truth: true,
        ground_truth: Some(rle::encode(&sample.mask)),
    }))
}

async fn model_info(State(state): State<AppState>) -> Result<Json<ModelInfo>, ApiError> {
    let loaded = state.model()?;
    let mut supported = vec!["point".to_string(), "box".to_string()];
    if loaded.model.uses_text() {
        supported.push("text".into());
    }
    Ok(Json(ModelInfo {
        checkpoint_id: loaded.meta.checkpoint_id(),
        config_hash: loaded.meta.config_hash.clone(),
        ablation: loaded.meta.config.train.ablation.to_string(),
        image_size: loaded.model.image_size(),
        supported_prompts: supported,
    }))
}

async fn reload(State(state): State<AppState>, body: Bytes) -> Result<Json<ModelInfo>, ApiError> {
    if !state.allow_reload() {
        return Err(ApiError::Forbidden("checkpoint reload is disabled".into()));
    }
    let req: ReloadRequest = parse_json(&body)?;
    let dir = req.checkpoint;
    if !dir.is_dir() {
        return Err(ApiError::NotFound(format!("no checkpoint directory at {}", dir.display())));
    }
    let loaded = tokio::task::spawn_blocking(move || LoadedModel::load(&dir))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    state.replace_model(loaded);
    model_info(State(state)).await
}
