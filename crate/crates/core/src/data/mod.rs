//! Volumes, 2D slice samples and the datasets built from them.

mod archive;
mod manifest;
mod prepare;
mod synth;

use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::prompt_text_for;

pub use archive::{read_archive, sidecar_path, write_archive};
pub use manifest::{assign_splits, Manifest, ManifestEntry, Split, SplitFractions, Window, MANIFEST_FILE};
pub use prepare::{prepare_dataset, read_volume, PrepareOptions};
pub use synth::{rasterize, synth_dataset, synth_images, ShapeKind, SynthImage, SHAPES};

/// Abdominal organs in label order; label value `i + 1` is `ORGANS[i]`.
pub const ORGANS: [&str; 4] = ["liver", "kidney", "spleen", "pancreas"];

pub fn organ_name(id: u8) -> Option<&'static str> {
    ORGANS.get((id as usize).checked_sub(1)?).copied()
}

pub fn organ_id(name: &str) -> Option<u8> {
    ORGANS.iter().position(|o| *o == name).map(|i| i as u8 + 1)
}

/// A labelled CT volume, `[D, H, W]`, with per-axis spacing (z, y, x) in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    pub id: String,
    pub voxels: Array3<f32>,
    pub labels: Array3<u8>,
    pub spacing: [f64; 3],
}

impl VolumeRecord {
    pub fn new(id: impl Into<String>, voxels: Array3<f32>, labels: Array3<u8>, spacing: [f64; 3]) -> Result<Self> {
        let v = Self {
            id: id.into(),
            voxels,
            labels,
            spacing,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::validation("id", "volume id is empty"));
        }
        if self.voxels.dim() != self.labels.dim() {
            return Err(Error::shape(format!(
                "volume {}: voxels {:?} and labels {:?} differ",
                self.id,
                self.voxels.dim(),
                self.labels.dim()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize > ORGANS.len()) {
            return Err(Error::validation("labels", format!("volume {}: label {bad} is not in 0..=4", self.id)));
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::validation("spacing", format!("volume {}: spacing {:?}", self.id, self.spacing)));
        }
        Ok(())
    }
}

/// Where a slice sample came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceSource {
    pub volume_id: String,
    pub slice_index: usize,
}

/// One 2D image with the mask of a single target structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub image: Array2<f32>,
    pub mask: Array2<bool>,
    pub organ_id: u8,
    pub organ_name: String,
    pub text_prompt: String,
    pub source: SliceSource,
}

impl SliceSample {
    /// `"<organ>.<volume>_<slice>"`; unique within a dataset.
    pub fn id(&self) -> String {
        format!("{}.{}_{}", self.organ_name, self.source.volume_id, self.source.slice_index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.dim() != self.mask.dim() {
            return Err(Error::shape(format!(
                "image {:?} and mask {:?} differ",
                self.image.dim(),
                self.mask.dim()
            )));
        }
        if !self.image.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::validation("image", "values must lie in [0, 1]"));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::validation("mask", "mask has no foreground"));
        }
        if self.organ_name.is_empty() || !self.text_prompt.contains(&self.organ_name) {
            return Err(Error::validation(
                "text_prompt",
                format!("`{}` does not mention `{}`", self.text_prompt, self.organ_name),
            ));
        }
        Ok(())
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `clip((x − lo) / (hi − lo), 0, 1)` elementwise.
pub fn window_normalize(voxels: ArrayView3<f32>, lo: f32, hi: f32) -> Result<Array3<f32>> {
    if !(lo < hi) {
        return Err(Error::Config(format!("window lo {lo} must be below hi {hi}")));
    }
    let scale = hi - lo;
    Ok(voxels.mapv(|x| ((x - lo) / scale).clamp(0.0, 1.0)))
}

/// One sample per axial slice with at least `min_pixels` voxels of `organ_id`.
/// The volume's voxels are expected to be normalized already.
pub fn extract_slices(volume: &VolumeRecord, organ_id: u8, min_pixels: usize) -> Result<Vec<SliceSample>> {
    let name = organ_name(organ_id)
        .ok_or_else(|| Error::validation("organ_id", format!("{organ_id} is not in 1..=4")))?;
    if min_pixels == 0 {
        return Err(Error::validation("min_pixels", "must be at least 1"));
    }
    volume.validate()?;
    let mut out = Vec::new();
    for (z, labels) in volume.labels.axis_iter(Axis(0)).enumerate() {
        let mask = labels.mapv(|l| l == organ_id);
        if mask.iter().filter(|&&m| m).count() < min_pixels {
            continue;
        }
        let image = volume.voxels.index_axis(Axis(0), z).to_owned();
        out.push(SliceSample {
            image,
            mask,
            organ_id,
            organ_name: name.to_string(),
            text_prompt: prompt_text_for(name),
            source: SliceSource {
                volume_id: volume.id.clone(),
                slice_index: z,
            },
        });
    }
    Ok(out)
}

/// Nearest-neighbour resampling of a mask to `(h, w)`.
pub fn resize_mask(mask: &Array2<bool>, h: usize, w: usize) -> Array2<bool> {
    let (mh, mw) = mask.dim();
    if (mh, mw) == (h, w) {
        return mask.clone();
    }
    Array2::from_shape_fn((h, w), |(r, c)| {
        let sr = ((r as f64 + 0.5) * mh as f64 / h as f64).floor() as usize;
        let sc = ((c as f64 + 0.5) * mw as f64 / w as f64).floor() as usize;
        mask[(sr.min(mh - 1), sc.min(mw - 1))]
    })
}

/// Tight bounding box `(x0, y0, x1, y1)` in pixel-edge coordinates.
pub fn mask_bbox(mask: &Array2<bool>) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    Zip::indexed(mask).for_each(|(r, c), &m| {
        if m {
            b = Some(match b {
                None => (c, r, c + 1, r + 1),
                Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c + 1), y1.max(r + 1)),
            });
        }
    });
    b
}
