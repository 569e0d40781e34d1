use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use ndarray_npy::{NpzReader, NpzWriter};
use serde::{Deserialize, Serialize};

use super::{SliceSample, SliceSource};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    organ_id: u8,
    organ_name: String,
    text_prompt: String,
    source: SliceSource,
}

/// `foo.npz` -> `foo.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `image` (f32) and `mask` (u8) to a compressed `.npz` and the
/// remaining fields to a JSON sidecar next to it.
pub fn write_archive(sample: &SliceSample, path: &Path) -> Result<()> {
    sample.validate()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut npz = NpzWriter::new_compressed(BufWriter::new(file));
    let mask = sample.mask.mapv(u8::from);
    let fmt = |e: ndarray_npy::WriteNpzError| Error::io(path, std::io::Error::other(e));
    npz.add_array("image", &sample.image).map_err(fmt)?;
    npz.add_array("mask", &mask).map_err(fmt)?;
    npz.finish().map_err(fmt)?;
    let meta = Sidecar {
        organ_id: sample.organ_id,
        organ_name: sample.organ_name.clone(),
        text_prompt: sample.text_prompt.clone(),
        source: sample.source.clone(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<SliceSample> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: ndarray_npy::ReadNpzError| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e));
    let mut npz = NpzReader::new(file).map_err(bad)?;
    let names = npz.names().map_err(bad)?;
    for key in ["image", "mask"] {
        if !names.iter().any(|n| n == key) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                key: key.into(),
            });
        }
    }
    let image: Array2<f32> = npz.by_name("image").map_err(bad)?;
    let mask: Array2<u8> = npz.by_name("mask").map_err(bad)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: Sidecar = serde_json::from_str(&text)?;
    let sample = SliceSample {
        image,
        mask: mask.mapv(|m| m != 0),
        organ_id: meta.organ_id,
        organ_name: meta.organ_name,
        text_prompt: meta.text_prompt,
        source: meta.source,
    };
    sample.validate()?;
    Ok(sample)
}
