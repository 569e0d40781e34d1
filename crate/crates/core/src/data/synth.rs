//! Two-shape synthetic images.
//!
//! Every image holds two different shapes with independently drawn
//! intensities, so a prompt that names one of them is the only thing that
//! tells the two targets apart.

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{assign_splits, write_archive, Manifest, ManifestEntry, SliceSample, SliceSource, SplitFractions};
use crate::error::{Error, Result};
use crate::prompt::prompt_text_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

pub const SHAPES: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// 1-based id used in place of an organ id.
    pub fn id(self) -> u8 {
        SHAPES.iter().position(|s| *s == self).unwrap() as u8 + 1
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            ShapeKind::Triangle => {
                // Apex up, base at 0.7 r below the center.
                if !(-r..=0.7 * r).contains(&dy) {
                    return false;
                }
                dx.abs() <= (dy + r) / (1.7 * r) * 1.15 * r
            }
            ShapeKind::Cross => {
                let arm = 0.35 * r;
                (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
            }
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pixel `(row, col)` is inside when its center `(col + ½, row + ½)` is.
pub fn rasterize(kind: ShapeKind, size: usize, cx: f64, cy: f64, r: f64) -> Array2<bool> {
    Array2::from_shape_fn((size, size), |(row, col)| {
        kind.contains(col as f64 + 0.5 - cx, row as f64 + 0.5 - cy, r)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub image: Array2<f32>,
    pub shapes: [(ShapeKind, Array2<bool>); 2],
}

impl SynthImage {
    /// One sample per shape, prompted by the shape's name.
    pub fn samples(&self) -> [SliceSample; 2] {
        let sample = |k: usize| {
            let (kind, mask) = &self.shapes[k];
            SliceSample {
                image: self.image.clone(),
                mask: mask.clone(),
                organ_id: kind.id(),
                organ_name: kind.name().to_string(),
                text_prompt: prompt_text_for(kind.name()),
                source: SliceSource {
                    volume_id: self.id.clone(),
                    slice_index: k,
                },
            }
        };
        [sample(0), sample(1)]
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 200;
/// Minimum pixel gap between the two shapes.
const GAP: usize = 2;

fn dilate(mask: &Array2<bool>, by: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r0, r1) = (r.saturating_sub(by), (r + by).min(h - 1));
        let (c0, c1) = (c.saturating_sub(by), (c + by).min(w - 1));
        (r0..=r1).any(|rr| (c0..=c1).any(|cc| mask[(rr, cc)]))
    })
}

fn generate(index: usize, size: usize, seed: u64) -> Result<SynthImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut kinds = SHAPES.to_vec();
    kinds.shuffle(&mut rng);
    let s = size as f64;
    let (r_lo, r_hi) = (s / 8.0, s / 5.5);

    let mut placed: Vec<(ShapeKind, Array2<bool>)> = Vec::with_capacity(2);
    let mut blocked = Array2::from_elem((size, size), false);
    for &kind in &kinds[..2] {
        let mut attempt = 0;
        let mask = loop {
            if attempt == MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::Generation(format!(
                    "image {index}: could not place a {kind} without overlap in {MAX_PLACEMENT_ATTEMPTS} attempts"
                )));
            }
            attempt += 1;
            let r = rng.random_range(r_lo..=r_hi);
            let cx = rng.random_range(r + 1.0..=s - r - 1.0);
            let cy = rng.random_range(r + 1.0..=s - r - 1.0);
            let m = rasterize(kind, size, cx, cy, r);
            if !m.iter().zip(blocked.iter()).any(|(&a, &b)| a && b) {
                break m;
            }
        };
        let grown = dilate(&mask, GAP);
        blocked.zip_mut_with(&grown, |b, &g| *b |= g);
        placed.push((kind, mask));
    }

    let background: f32 = rng.random_range(0.05..0.25);
    let levels: [f32; 2] = [rng.random_range(0.55..0.95), rng.random_range(0.55..0.95)];
    let noise = Normal::new(0.0f32, 0.03).expect("valid deviation");
    let mut image = Array2::from_elem((size, size), background);
    for ((_, mask), level) in placed.iter().zip(levels) {
        image.zip_mut_with(mask, |v, &m| {
            if m {
                *v = level;
            }
        });
    }
    image.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));

    let second = placed.pop().unwrap();
    let first = placed.pop().unwrap();
    Ok(SynthImage {
        id: format!("synth{index:04}"),
        image,
        shapes: [first, second],
    })
}

/// `n` images of `size × size`; image `i` depends only on `(i, size, seed)`.
pub fn synth_images(n: usize, size: usize, seed: u64) -> Result<Vec<SynthImage>> {
    if n == 0 {
        return Err(Error::validation("n_images", "must be at least 1"));
    }
    if size < 32 {
        return Err(Error::validation("image_size", format!("{size} is below the minimum of 32")));
    }
    (0..n).map(|i| generate(i, size, seed)).collect()
}

/// Generates images, writes one archive per shape under `root` and saves
/// the manifest. Images are assigned to splits as whole volumes.
pub fn synth_dataset(n: usize, size: usize, seed: u64, fractions: SplitFractions, root: &Path) -> Result<Manifest> {
    let images = synth_images(n, size, seed)?;
    let splits = assign_splits(images.iter().map(|i| i.id.as_str()), fractions, seed)?;
    let mut entries = Vec::with_capacity(2 * n);
    for img in &images {
        for sample in img.samples() {
            let rel = PathBuf::from(&sample.organ_name)
                .join(format!("{}_{}.npz", sample.source.volume_id, sample.source.slice_index));
            write_archive(&sample, &root.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel,
                organ_id: sample.organ_id,
                organ_name: sample.organ_name.clone(),
                split: splits[&img.id],
                volume_id: img.id.clone(),
                slice_index: sample.source.slice_index,
            });
        }
    }
    let manifest = Manifest {
        seed,
        normalization: None,
        fractions,
        entries,
    };
    manifest.save(root)?;
    Ok(manifest)
}
