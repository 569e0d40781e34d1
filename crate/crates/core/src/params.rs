//! Named, seeded parameter storage.
//!
//! Model layers are built through a [`VarBuilder`] backed by [`ParamStore`].
//! Each variable is initialized from an RNG keyed by `(seed, name)`, so the
//! initial weights do not depend on construction order or on the process-wide
//! RNG that candle's own variable map uses.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("len", &self.len())
            .finish()
    }
}

/// Derives the per-variable RNG.
pub(crate) fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

fn sample_init(shape: &Shape, init: Init, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.elem_count();
    match init {
        Init::Const(c) => vec![c; n],
        Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..=up)).collect(),
        Init::Randn { mean, stdev } => {
            let dist = Normal::new(mean, stdev.max(f64::MIN_POSITIVE)).expect("finite stdev");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let fan = fan.for_shape(shape).max(1);
            let std = non_linearity.gain() / (fan as f64).sqrt();
            match dist {
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                }
                NormalOrUniform::Normal => {
                    let dist = Normal::new(0.0, std).expect("finite stdev");
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            }
        }
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("param lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().expect("param lock").keys().cloned().collect()
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .expect("param lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("param lock").get(name).cloned()
    }

    /// Overwrites a variable in place; every layer holding it sees the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::validation("parameter", format!("unknown parameter `{name}`")))?;
        if var.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// Sets every variable whose name satisfies `pred` to zero.
    pub fn zero_where(&self, pred: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.vars() {
            if pred(&name) {
                var.set(&var.zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect()
    }

    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(), path)?;
        Ok(())
    }

    /// Loads values for every existing variable; missing names are an error.
    pub fn load_safetensors(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| {
            Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
        })?;
        for (name, _) in self.vars() {
            let t = loaded.get(&name).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                key: name.clone(),
            })?;
            self.set(&name, t)?;
        }
        Ok(())
    }
}

impl candle_nn::var_builder::SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut vars = self.vars.lock().expect("param lock");
        if let Some(v) = vars.get(name) {
            if v.shape() != &s {
                candle_core::bail!(
                    "parameter `{name}` requested with shape {s:?}, stored as {:?}",
                    v.shape()
                );
            }
            return Ok(v.as_tensor().clone());
        }
        let mut rng = keyed_rng(self.seed, name);
        let data = sample_init(&s, h, &mut rng);
        let t = Tensor::from_vec(data, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        let vars = self.vars.lock().expect("param lock");
        match vars.get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("unknown parameter `{name}`"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.lock().expect("param lock").contains_key(name)
    }
}
