//! Versioned checkpoints: `ckpt_<step>/weights.safetensors` plus `meta.json`.

use std::path::{Path, PathBuf};

use candle_core::DType;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::OmtSam;

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: usize,
    pub dtype: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Training RNG state when the checkpoint was taken.
    pub rng: Option<ChaCha8Rng>,
}

impl CheckpointMeta {
    /// `<run name>/ckpt_<step>`, stable for a given run.
    pub fn checkpoint_id(&self) -> String {
        format!("{}/ckpt_{}", self.config.name, self.step)
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        _ => "f32",
    }
}

pub fn checkpoint_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(format!("ckpt_{step}"))
}

/// Writes the model's weights and metadata to `run_dir/ckpt_<step>`.
pub fn save(model: &OmtSam, run_dir: &Path, step: usize, rng: Option<&ChaCha8Rng>) -> Result<PathBuf> {
    let dir = checkpoint_dir(run_dir, step);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    model.params().save_safetensors(&dir.join(WEIGHTS_FILE))?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        step,
        dtype: dtype_name(model.dtype()).into(),
        config_hash: model.config().hash(),
        config: model.config().clone(),
        rng: rng.cloned(),
    };
    let path = dir.join(META_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::validation(
                "format_version",
                format!("{}: version {v} is not supported (expected {FORMAT_VERSION})", path.display()),
            ))
        }
        None => {
            return Err(Error::Format {
                path,
                key: "format_version".into(),
            })
        }
    }
    Ok(serde_json::from_value(value)?)
}

/// Rebuilds the model recorded in `dir` and loads its weights.
pub fn load(dir: &Path) -> Result<(OmtSam, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let dtype = if meta.dtype == "f64" { DType::F64 } else { DType::F32 };
    let model = OmtSam::new(&meta.config, dtype)?;
    model.params().load_safetensors(&dir.join(WEIGHTS_FILE))?;
    Ok((model, meta))
}
