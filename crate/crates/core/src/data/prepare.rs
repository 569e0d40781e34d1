use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3};
use ndarray_npy::NpzReader;

use super::{
    assign_splits, extract_slices, organ_name, window_normalize, write_archive, Manifest, ManifestEntry,
    SliceSample, SplitFractions, VolumeRecord, Window,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareOptions {
    /// Organ label values to extract.
    pub organs: Vec<u8>,
    pub window: Window,
    pub min_pixels: usize,
    pub seed: u64,
    pub fractions: SplitFractions,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            organs: vec![1, 2, 3, 4],
            window: Window::default(),
            min_pixels: 100,
            seed: 0,
            fractions: SplitFractions::default(),
        }
    }
}

type Npz = NpzReader<File>;

fn missing(path: &Path, key: &str) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        key: key.into(),
    }
}

fn read_voxels(npz: &mut Npz, path: &Path) -> Result<Array3<f32>> {
    if let Ok(a) = npz.by_name::<_, ndarray::Ix3>("voxels") {
        let a: Array3<f32> = a;
        return Ok(a);
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<f64>, ndarray::Ix3>("voxels") {
        return Ok(a.mapv(|v| v as f32));
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<i16>, ndarray::Ix3>("voxels") {
        return Ok(a.mapv(f32::from));
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<i32>, ndarray::Ix3>("voxels") {
        return Ok(a.mapv(|v| v as f32));
    }
    Err(missing(path, "voxels"))
}

fn read_labels(npz: &mut Npz, path: &Path) -> Result<Array3<u8>> {
    let narrow = |v: i64| -> Result<u8> {
        u8::try_from(v).map_err(|_| Error::validation("labels", format!("{}: label {v} is out of range", path.display())))
    };
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<u8>, ndarray::Ix3>("labels") {
        return Ok(a);
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<i16>, ndarray::Ix3>("labels") {
        let v = a.iter().map(|&x| narrow(i64::from(x))).collect::<Result<Vec<_>>>()?;
        return Ok(Array3::from_shape_vec(a.dim(), v).expect("same shape"));
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<i32>, ndarray::Ix3>("labels") {
        let v = a.iter().map(|&x| narrow(i64::from(x))).collect::<Result<Vec<_>>>()?;
        return Ok(Array3::from_shape_vec(a.dim(), v).expect("same shape"));
    }
    if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<i64>, ndarray::Ix3>("labels") {
        let v = a.iter().map(|&x| narrow(x)).collect::<Result<Vec<_>>>()?;
        return Ok(Array3::from_shape_vec(a.dim(), v).expect("same shape"));
    }
    Err(missing(path, "labels"))
}

/// Reads a volume stored as `.npz` with `voxels` `[D, H, W]` (f32, f64, i16
/// or i32), integer `labels` of the same shape and an optional f64
/// `spacing` triple. The file stem becomes the volume id.
pub fn read_volume(path: &Path) -> Result<VolumeRecord> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut npz = NpzReader::new(file)
        .map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
    let voxels = read_voxels(&mut npz, path)?;
    let labels = read_labels(&mut npz, path)?;
    let spacing = match npz.by_name::<ndarray::OwnedRepr<f64>, ndarray::Ix1>("spacing") {
        Ok(s) => {
            let s: Array1<f64> = s;
            <[f64; 3]>::try_from(s.to_vec()).map_err(|_| missing(path, "spacing"))?
        }
        Err(_) => [1.0; 3],
    };
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::validation("path", format!("{} has no usable file name", path.display())))?;
    VolumeRecord::new(id, voxels, labels, spacing)
}

fn volume_samples(path: &Path, opts: &PrepareOptions) -> Result<Vec<(String, u8, SliceSample)>> {
    let mut volume = read_volume(path)?;
    volume.voxels = window_normalize(volume.voxels.view(), opts.window.lo, opts.window.hi)?;
    let mut out = Vec::new();
    for &organ in &opts.organs {
        for sample in extract_slices(&volume, organ, opts.min_pixels)? {
            out.push((volume.id.clone(), organ, sample));
        }
    }
    Ok(out)
}

/// Windows, slices and archives every `*.npz` volume in `input`, then
/// writes the manifest under `out`. Unreadable volumes are logged and
/// skipped; the call fails only when every volume fails.
pub fn prepare_dataset(input: &Path, out: &Path, opts: &PrepareOptions) -> Result<Manifest> {
    for &o in &opts.organs {
        if organ_name(o).is_none() {
            return Err(Error::validation("organs", format!("{o} is not an organ label")));
        }
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "npz"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::validation("input", format!("no .npz volumes in {}", input.display())));
    }
    let ids: Vec<String> = paths
        .iter()
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let splits = assign_splits(ids.iter().map(String::as_str), opts.fractions, opts.seed)?;

    let mut entries = Vec::new();
    let mut failed = 0;
    for path in &paths {
        let samples = match volume_samples(path, opts) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                failed += 1;
                continue;
            }
        };
        for (volume_id, organ, sample) in samples {
            let rel = PathBuf::from(&sample.organ_name).join(format!("{volume_id}_{}.npz", sample.source.slice_index));
            write_archive(&sample, &out.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel,
                organ_id: organ,
                organ_name: sample.organ_name.clone(),
                split: splits[&volume_id],
                volume_id,
                slice_index: sample.source.slice_index,
            });
        }
        log::info!("{}: {} slices so far", path.display(), entries.len());
    }
    if failed == paths.len() {
        return Err(Error::validation("input", format!("all {failed} volumes in {} failed", input.display())));
    }
    let manifest = Manifest {
        seed: opts.seed,
        normalization: Some(opts.window),
        fractions: opts.fractions,
        entries,
    };
    manifest.save(out)?;
    Ok(manifest)
}
