//! Finite-difference verification of analytic gradients.
//!
//! Each registered component is rebuilt in 64-bit precision with random
//! inputs and reduced to a scalar through fixed random readout weights. At
//! `n_probes` coordinates (spread round-robin over the checked tensors) the
//! backpropagated gradient is compared with the central difference
//! `(f(x + h) − f(x − h)) / 2h`.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DecoderConfig, EncoderConfig, LossConfig, PromptConfig};
use crate::decoder::MaskDecoder;
use crate::encoder::ImageEncoder;
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::params::ParamStore;
use crate::prompt::{AlignedEmbeddings, CrossFusion};

pub const STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_PROBES: usize = 12;
/// Lower bound on the denominator of the relative error.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    TotalLoss,
    Encoder,
    CrossFuse,
    Decoder,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::TotalLoss, Component::Encoder, Component::CrossFuse, Component::Decoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::TotalLoss => "total_loss",
            Component::Encoder => "encoder",
            Component::CrossFuse => "cross_fuse",
            Component::Decoder => "decoder",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| {
            Error::validation(
                "component",
                format!("unknown component `{s}` (expected total_loss, encoder, cross_fuse or decoder)"),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: String,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub probes: Vec<Probe>,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} ({} probes, max relative error {:.3e}, tolerance {:.0e})",
            self.component,
            if self.passed { "pass" } else { "FAIL" },
            self.probes.len(),
            self.max_rel_error,
            self.tolerance
        )
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(MAGNITUDE_FLOOR)
}

/// Backpropagated gradients of `f` with respect to `vars`.
pub fn analytic_gradients(vars: &[(String, Var)], f: &dyn Fn() -> Result<Tensor>) -> Result<Vec<Tensor>> {
    let grads = f()?.backward()?;
    vars.iter()
        .map(|(name, v)| {
            grads
                .get(v.as_tensor())
                .cloned()
                .ok_or_else(|| Error::validation("gradient", format!("`{name}` does not influence the output")))
        })
        .collect()
}

fn set_element(var: &Var, index: usize, value: f64) -> Result<()> {
    let mut data = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    data[index] = value;
    var.set(&Tensor::from_vec(data, var.shape(), var.device())?)?;
    Ok(())
}

/// Compares `analytic` (one tensor per var) with central differences of `f`.
pub fn probe_against(
    component: &str,
    vars: &[(String, Var)],
    f: &dyn Fn() -> Result<Tensor>,
    analytic: &[Tensor],
    n_probes: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if vars.is_empty() || vars.len() != analytic.len() {
        return Err(Error::validation("vars", "need one analytic gradient per checked tensor"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(n_probes);
    for p in 0..n_probes {
        let (name, var) = &vars[p % vars.len()];
        let index = rng.random_range(0..var.elem_count());
        let x = var.as_tensor().flatten_all()?.to_vec1::<f64>()?[index];
        set_element(var, index, x + STEP)?;
        let up = f()?.to_scalar::<f64>()?;
        set_element(var, index, x - STEP)?;
        let down = f()?.to_scalar::<f64>()?;
        set_element(var, index, x)?;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[p % vars.len()].flatten_all()?.to_vec1::<f64>()?[index];
        probes.push(Probe {
            tensor: name.clone(),
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        component: component.to_string(),
        step: STEP,
        tolerance,
        max_rel_error,
        passed: max_rel_error < tolerance,
        probes,
    })
}

pub fn check_function(
    component: &str,
    vars: &[(String, Var)],
    f: &dyn Fn() -> Result<Tensor>,
    n_probes: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(vars, f)?;
    probe_against(component, vars, f, &analytic, n_probes, tolerance, seed)
}

fn random_var(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Var> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu)?)?)
}

fn readout(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    Ok(random_var(rng, shape, -1.0, 1.0)?.as_tensor().detach())
}

fn param(store: &ParamStore, name: &str) -> Result<(String, Var)> {
    store
        .get(name)
        .map(|v| (name.to_string(), v))
        .ok_or_else(|| Error::validation("parameter", format!("unknown parameter `{name}`")))
}

/// Runs the finite-difference check for one registered component.
pub fn grad_check(component: Component, n_probes: usize, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dev = Device::Cpu;
    let store = ParamStore::new(seed);
    let vb = store.var_builder(DType::F64, &dev);
    let name = component.as_str();
    match component {
        Component::TotalLoss => {
            let probs = random_var(&mut rng, &[2, 8, 8], 0.05, 0.95)?;
            let target = random_var(&mut rng, &[2, 8, 8], 0.0, 1.0)?.as_tensor().ge(0.5)?.to_dtype(DType::F64)?;
            let cfg = LossConfig::default();
            let p = probs.clone();
            let f = move || total_loss(p.as_tensor(), &target, &cfg);
            check_function(name, &[("probs".into(), probs)], &f, n_probes, tolerance, seed)
        }
        Component::Encoder => {
            let cfg = EncoderConfig::default();
            let enc = ImageEncoder::new(&cfg, true, vb.pp("encoder"))?;
            let s = cfg.image_size;
            let image = random_var(&mut rng, &[1, cfg.in_channels, s, s], 0.0, 1.0)?;
            let g = cfg.grid();
            let w = readout(&mut rng, &[1, cfg.neck_dim, g, g])?;
            let img = image.clone();
            let f = move || Ok((enc.encode(img.as_tensor())?.fused * &w)?.sum_all()?);
            let vars = vec![
                ("image".to_string(), image),
                param(&store, "encoder.neck.conv1.weight")?,
                param(&store, "encoder.neck.conv2.weight")?,
            ];
            check_function(name, &vars, &f, n_probes, tolerance, seed)
        }
        Component::CrossFuse => {
            let cfg = PromptConfig::default();
            let fusion = CrossFusion::new(cfg.clip_dim, cfg.fusion_heads, EncoderConfig::default().neck_dim, vb.pp("fusion"))?;
            let text = random_var(&mut rng, &[1, 5, cfg.clip_dim], -1.0, 1.0)?;
            let image = random_var(&mut rng, &[1, 49, cfg.clip_dim], -1.0, 1.0)?;
            let w = readout(&mut rng, &[1, 5, EncoderConfig::default().neck_dim])?;
            let (t, i) = (text.clone(), image.clone());
            let f = move || {
                let aligned = AlignedEmbeddings {
                    text_tokens: t.as_tensor().clone(),
                    image_tokens: i.as_tensor().clone(),
                };
                Ok((fusion.forward(&aligned)?.tokens * &w)?.sum_all()?)
            };
            let vars = vec![("text_tokens".to_string(), text), ("image_tokens".to_string(), image)];
            check_function(name, &vars, &f, n_probes, tolerance, seed)
        }
        Component::Decoder => {
            let dim = EncoderConfig::default().neck_dim;
            let g = EncoderConfig::default().grid();
            let dcfg = DecoderConfig::default();
            let dec = MaskDecoder::new(dim, &dcfg, vb.pp("decoder"))?;
            let image = random_var(&mut rng, &[1, dim, g, g], -1.0, 1.0)?;
            let tokens = random_var(&mut rng, &[1, 4, dim], -1.0, 1.0)?;
            let dense = readout(&mut rng, &[1, dim, g, g])?;
            let pe = readout(&mut rng, &[dim, g, g])?;
            let u = g * dcfg.upscale_factor;
            let w = readout(&mut rng, &[1, u, u])?;
            let (im, tk) = (image.clone(), tokens.clone());
            let f = move || Ok((dec.decode(im.as_tensor(), tk.as_tensor(), &dense, &pe)? * &w)?.sum_all()?);
            let vars = vec![
                ("image_embedding".to_string(), image),
                ("prompt_tokens".to_string(), tokens),
                param(&store, "decoder.hyper.2.weight")?,
            ];
            check_function(name, &vars, &f, n_probes, tolerance, seed)
        }
    }
}
