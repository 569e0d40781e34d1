//! Point, box and mask prompts.
//!
//! Coordinates are embedded with a frozen random Fourier basis; point
//! labels and box corners add learned type embeddings. Mask prompts go
//! through a strided convolution stack down to the image-embedding grid.
//! Without any geometric prompt a learned silent token and a learned dense
//! map stand in.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Init, VarBuilder};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LayerNorm2d;
use crate::params::keyed_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Positive,
    Negative,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

impl PointPrompt {
    pub fn new(x: f64, y: f64, label: PointLabel) -> Self {
        Self { x, y, label }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.label == PointLabel::Invalid {
            return Ok(());
        }
        let inside = self.x >= 0.0 && self.y >= 0.0 && self.x < width as f64 && self.y < height as f64;
        if !inside {
            return Err(Error::validation(
                "points",
                format!("point ({}, {}) lies outside the {width}x{height} image", self.x, self.y),
            ));
        }
        Ok(())
    }
}

/// Axis-aligned box in pixel-edge coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxPrompt {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.check_order()?;
        Ok(b)
    }

    fn check_order(&self) -> Result<()> {
        if !(self.x0 < self.x1 && self.y0 < self.y1) {
            return Err(Error::validation(
                "boxes",
                format!(
                    "degenerate box ({}, {}, {}, {})",
                    self.x0, self.y0, self.x1, self.y1
                ),
            ));
        }
        Ok(())
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        self.check_order()?;
        let (w, h) = (width as f64, height as f64);
        if self.x0 < 0.0 || self.y0 < 0.0 || self.x1 > w || self.y1 > h {
            return Err(Error::validation(
                "boxes",
                format!("box corners lie outside the {width}x{height} image"),
            ));
        }
        Ok(())
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            x0: self.x0 * sx,
            y0: self.y0 * sy,
            x1: self.x1 * sx,
            y1: self.y1 * sy,
        }
    }
}

/// Sparse prompt tokens `[K, D]` and the dense prompt map `[C, G, G]`.
#[derive(Debug, Clone)]
pub struct GeometricEmbeddings {
    pub sparse: Tensor,
    pub dense: Tensor,
}

/// Frozen Gaussian frequency matrix mapping normalized `(x, y)` to `[sin, cos]` features.
#[derive(Debug, Clone)]
pub struct FourierBasis {
    /// Row-major `[2, dim/2]`.
    freqs: Vec<f64>,
    half: usize,
}

impl FourierBasis {
    pub fn new(dim: usize, scale: f64, seed: u64) -> Self {
        let half = dim / 2;
        let mut rng = keyed_rng(seed, "prompt.fourier_basis");
        let normal = Normal::new(0.0, scale).expect("positive scale");
        let freqs = (0..2 * half).map(|_| normal.sample(&mut rng)).collect();
        Self { freqs, half }
    }

    pub fn dim(&self) -> usize {
        2 * self.half
    }

    /// Features for coordinates already normalized to `[0, 1]²`.
    pub fn features(&self, u: f64, v: f64) -> Vec<f64> {
        let (cx, cy) = (2.0 * u - 1.0, 2.0 * v - 1.0);
        let proj: Vec<f64> = (0..self.half)
            .map(|j| std::f64::consts::TAU * (cx * self.freqs[j] + cy * self.freqs[self.half + j]))
            .collect();
        proj.iter().map(|p| p.sin()).chain(proj.iter().map(|p| p.cos())).collect()
    }
}

#[derive(Debug, Clone)]
struct MaskDownscaler {
    stages: Vec<(Conv2d, LayerNorm2d)>,
    out: Conv2d,
}

impl MaskDownscaler {
    fn new(factor: usize, dim: usize, vb: VarBuilder) -> Result<Self> {
        let hidden = (dim / 4).max(1);
        let mut kernels = Vec::new();
        let mut f = factor;
        while f > 1 && f % 2 == 0 {
            kernels.push(2);
            f /= 2;
        }
        if f > 1 {
            kernels.push(f);
        }
        let mut stages = Vec::new();
        let mut in_ch = 1;
        for (i, k) in kernels.into_iter().enumerate() {
            let conv = candle_nn::conv2d(
                in_ch,
                hidden,
                k,
                Conv2dConfig {
                    stride: k,
                    ..Default::default()
                },
                vb.pp(format!("stage{i}.conv")),
            )?;
            stages.push((conv, LayerNorm2d::new(hidden, 1e-6, vb.pp(format!("stage{i}.norm")))?));
            in_ch = hidden;
        }
        let out = candle_nn::conv2d(in_ch, dim, 1, Default::default(), vb.pp("out"))?;
        Ok(Self { stages, out })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = x.clone();
        for (conv, norm) in &self.stages {
            x = norm.forward(&conv.forward(&x)?)?.gelu()?;
        }
        self.out.forward(&x)
    }
}

#[derive(Debug)]
pub struct GeometricPromptEncoder {
    basis: FourierBasis,
    point_embeddings: Tensor,
    invalid_point: Tensor,
    corner_embeddings: Tensor,
    silent_token: Tensor,
    no_mask: Tensor,
    mask_downscaler: MaskDownscaler,
    dense_pe: Tensor,
    image_size: usize,
    grid: usize,
    dim: usize,
    clamped: AtomicUsize,
}

impl GeometricPromptEncoder {
    pub fn new(
        image_size: usize,
        patch_size: usize,
        dim: usize,
        fourier_scale: f64,
        seed: u64,
        vb: VarBuilder,
    ) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::Config(format!("prompt token width {dim} must be even")));
        }
        let init = Init::Randn {
            mean: 0.0,
            stdev: 1.0,
        };
        let basis = FourierBasis::new(dim, fourier_scale, seed);
        let grid = image_size / patch_size;
        let dense_pe = grid_encoding(&basis, grid, vb.dtype(), vb.device())?;
        Ok(Self {
            point_embeddings: vb.get_with_hints((2, dim), "point_embeddings", init)?,
            invalid_point: vb.get_with_hints((1, dim), "invalid_point", init)?,
            corner_embeddings: vb.get_with_hints((2, dim), "corner_embeddings", init)?,
            silent_token: vb.get_with_hints((1, dim), "silent_token", init)?,
            no_mask: vb.get_with_hints((dim, 1, 1), "no_mask", init)?,
            mask_downscaler: MaskDownscaler::new(patch_size, dim, vb.pp("mask_downscaler"))?,
            basis,
            dense_pe,
            image_size,
            grid,
            dim,
            clamped: AtomicUsize::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Positional encoding of the image-embedding grid cells, `[D, G, G]`.
    pub fn dense_pe(&self) -> &Tensor {
        &self.dense_pe
    }

    /// How many coordinates have been clamped into the image so far.
    pub fn clamped_coordinates(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    fn normalize(&self, c: f64) -> f64 {
        let u = c / self.image_size as f64;
        if !(0.0..=1.0).contains(&u) {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            return if u.is_nan() { 0.0 } else { u.clamp(0.0, 1.0) };
        }
        u
    }

    /// Fourier features of pixel coordinates, `[N, D]`.
    pub fn positional_encode(&self, coords: &[(f64, f64)]) -> Result<Tensor> {
        let data: Vec<f64> = coords
            .iter()
            .flat_map(|&(x, y)| self.basis.features(self.normalize(x), self.normalize(y)))
            .collect();
        let dev = self.point_embeddings.device();
        Ok(Tensor::from_vec(data, (coords.len(), self.dim), dev)?.to_dtype(self.point_embeddings.dtype())?)
    }

    pub fn embed_points(&self, points: &[PointPrompt]) -> Result<Tensor> {
        if points.is_empty() {
            return Ok(Tensor::zeros((0, self.dim), self.point_embeddings.dtype(), self.point_embeddings.device())?);
        }
        let coords: Vec<_> = points.iter().map(|p| (p.x, p.y)).collect();
        let pe = self.positional_encode(&coords)?;
        let rows = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Ok(match p.label {
                    PointLabel::Positive => (pe.narrow(0, i, 1)? + self.point_embeddings.narrow(0, 0, 1)?)?,
                    PointLabel::Negative => (pe.narrow(0, i, 1)? + self.point_embeddings.narrow(0, 1, 1)?)?,
                    PointLabel::Invalid => self.invalid_point.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }

    pub fn embed_box(&self, b: &BoxPrompt) -> Result<Tensor> {
        b.check_order()?;
        let pe = self.positional_encode(&[(b.x0, b.y0), (b.x1, b.y1)])?;
        Ok((pe + &self.corner_embeddings)?)
    }

    /// `[H, W]` mask prompt to a dense `[C, G, G]` map.
    pub fn embed_mask(&self, mask: &Tensor) -> Result<Tensor> {
        let s = self.image_size;
        if mask.dims() != [s, s] {
            return Err(Error::shape(format!(
                "mask prompt must be {s}x{s}, got {:?}",
                mask.dims()
            )));
        }
        let x = mask.to_dtype(self.no_mask.dtype())?.reshape((1, 1, s, s))?;
        Ok(self.mask_downscaler.forward(&x)?.squeeze(0)?)
    }

    fn no_mask_dense(&self) -> Result<Tensor> {
        Ok(self.no_mask.broadcast_as((self.dim, self.grid, self.grid))?.contiguous()?)
    }

    pub fn silent_embedding(&self) -> Result<GeometricEmbeddings> {
        Ok(GeometricEmbeddings {
            sparse: self.silent_token.clone(),
            dense: self.no_mask_dense()?,
        })
    }

    /// Sparse tokens in the order points, then box corners. Falls back to the
    /// silent token when neither is given.
    pub fn encode(
        &self,
        points: &[PointPrompt],
        boxes: &[BoxPrompt],
        mask: Option<&Tensor>,
    ) -> Result<GeometricEmbeddings> {
        let mut parts = Vec::new();
        if !points.is_empty() {
            parts.push(self.embed_points(points)?);
        }
        for b in boxes {
            parts.push(self.embed_box(b)?);
        }
        let sparse = if parts.is_empty() {
            self.silent_token.clone()
        } else {
            Tensor::cat(&parts, 0)?
        };
        let dense = match mask {
            Some(m) => self.embed_mask(m)?,
            None => self.no_mask_dense()?,
        };
        Ok(GeometricEmbeddings { sparse, dense })
    }
}

fn grid_encoding(basis: &FourierBasis, grid: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let dim = basis.dim();
    let mut data = vec![0.0; dim * grid * grid];
    for i in 0..grid {
        for j in 0..grid {
            let f = basis.features((j as f64 + 0.5) / grid as f64, (i as f64 + 0.5) / grid as f64);
            for (c, v) in f.into_iter().enumerate() {
                data[(c * grid + i) * grid + j] = v;
            }
        }
    }
    Ok(Tensor::from_vec(data, (dim, grid, grid), dev)?.to_dtype(dtype)?)
}
