use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use omtsam_core::checkpoint::{self, CheckpointMeta};
use omtsam_core::data::{read_archive, Manifest, ManifestEntry, SliceSample};
use omtsam_core::OmtSam;

use crate::error::ApiError;

/// A checkpoint held read-only for inference.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: OmtSam,
    pub meta: CheckpointMeta,
}

impl LoadedModel {
    pub fn load(dir: &Path) -> omtsam_core::Result<Self> {
        let (model, meta) = checkpoint::load(dir)?;
        Ok(Self { model, meta })
    }
}

/// A registered dataset root with its entries sorted by slice id.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn open(root: &Path) -> omtsam_core::Result<Self> {
        let manifest = Manifest::load(root)?;
        let mut entries = manifest.entries;
        entries.sort_by_key(|e| e.id());
        let index = entries.iter().enumerate().map(|(i, e)| (e.id(), i)).collect();
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn read(&self, entry: &ManifestEntry) -> omtsam_core::Result<SliceSample> {
        read_archive(&self.root.join(&entry.path))
    }
}

struct Shared {
    model: RwLock<Option<Arc<LoadedModel>>>,
    datasets: BTreeMap<String, Dataset>,
    allow_reload: bool,
}

/// Handler state. Cloning is cheap; the model slot is swapped atomically on
/// reload while in-flight requests keep the model they started with.
#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, datasets: BTreeMap<String, Dataset>, allow_reload: bool) -> Self {
        Self {
            shared: Arc::new(Shared {
                model: RwLock::new(model.map(Arc::new)),
                datasets,
                allow_reload,
            }),
        }
    }

    /// Opens every `id -> root` dataset.
    pub fn open_datasets(roots: &BTreeMap<String, PathBuf>) -> omtsam_core::Result<BTreeMap<String, Dataset>> {
        roots.iter().map(|(id, root)| Ok((id.clone(), Dataset::open(root)?))).collect()
    }

    pub fn model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.shared
            .model
            .read()
            .expect("model lock poisoned")
            .clone()
            .ok_or(ApiError::NotLoaded)
    }

    pub fn replace_model(&self, model: LoadedModel) {
        *self.shared.model.write().expect("model lock poisoned") = Some(Arc::new(model));
    }

    pub fn dataset(&self, id: &str) -> Result<&Dataset, ApiError> {
        self.shared
            .datasets
            .get(id)
            .ok_or_else(|| ApiError::NotFound(format!("unknown dataset `{id}`")))
    }

    pub fn allow_reload(&self) -> bool {
        self.shared.allow_reload
    }
}
