use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_archive, SliceSample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::validation("split", format!("`{s}` is not one of train, val, test")))
    }
}

/// Fractions of volumes per split; they must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be in [0, 1] and sum to 1")));
        }
        Ok(())
    }
}

/// Seeded assignment of whole volumes to splits.
pub fn assign_splits<'a>(
    volume_ids: impl IntoIterator<Item = &'a str>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    fractions.validate()?;
    let unique: BTreeSet<&str> = volume_ids.into_iter().collect();
    let mut ids: Vec<&str> = unique.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_train = (fractions.train * n as f64).round() as usize;
    let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train);
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.to_string(), split)
        })
        .collect())
}

/// Intensity window applied to the source volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f32,
    pub hi: f32,
}

impl Default for Window {
    fn default() -> Self {
        Self { lo: -200.0, hi: 300.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Archive path relative to the dataset root.
    pub path: PathBuf,
    pub organ_id: u8,
    pub organ_name: String,
    pub split: Split,
    pub volume_id: String,
    pub slice_index: usize,
}

impl ManifestEntry {
    /// Matches [`SliceSample::id`].
    pub fn id(&self) -> String {
        format!("{}.{}_{}", self.organ_name, self.volume_id, self.slice_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    /// `None` for data that was never windowed (synthetic images).
    pub normalization: Option<Window>,
    pub fractions: SplitFractions,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.check_disjoint()?;
        Ok(manifest)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.check_disjoint()?;
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn volume_ids(&self, split: Split) -> BTreeSet<&str> {
        self.entries(split).map(|e| e.volume_id.as_str()).collect()
    }

    pub fn find(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id() == id)
    }

    /// No volume contributes to two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(&e.volume_id, e.split) {
                if prev != e.split {
                    return Err(Error::validation(
                        "manifest",
                        format!("volume {} appears in both {prev} and {}", e.volume_id, e.split),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load_samples(&self, root: &Path, split: Split) -> Result<Vec<SliceSample>> {
        self.entries(split).map(|e| read_archive(&root.join(&e.path))).collect()
    }
}
