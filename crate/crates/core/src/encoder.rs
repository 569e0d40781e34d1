//! ViT image encoder with a multi-layer convolutional neck.
//!
//! The input is cut into non-overlapping `P×P` patches, projected by a
//! strided convolution and given learned positional embeddings. After the
//! transformer blocks, the outputs of the last `num_tap_layers` blocks are
//! each run through one shared neck (1×1 conv, channel norm, 3×3 conv,
//! channel norm) and summed into the image embedding.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Init, VarBuilder};

pub use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm2d, TransformerBlock};

/// Neck outputs for the tapped layers and their fused sum, each `[B, C, G, G]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub taps: Vec<Tensor>,
    pub fused: Tensor,
}

#[derive(Debug, Clone)]
pub struct Neck {
    reduce: Conv2d,
    norm1: LayerNorm2d,
    mix: Conv2d,
    norm2: LayerNorm2d,
    in_dim: usize,
}

impl Neck {
    pub fn new(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        let reduce = candle_nn::conv2d_no_bias(in_dim, out_dim, 1, Default::default(), vb.pp("conv1"))?;
        let mix = candle_nn::conv2d_no_bias(
            out_dim,
            out_dim,
            3,
            Conv2dConfig {
                padding: 1,
                ..Default::default()
            },
            vb.pp("conv2"),
        )?;
        Ok(Self {
            reduce,
            norm1: LayerNorm2d::new(out_dim, 1e-6, vb.pp("norm1"))?,
            mix,
            norm2: LayerNorm2d::new(out_dim, 1e-6, vb.pp("norm2"))?,
            in_dim,
        })
    }

    /// `[B, embed_dim, G, G] -> [B, C, G, G]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_dim {
            return Err(Error::shape(format!(
                "neck expects {} input channels, got {c}",
                self.in_dim
            )));
        }
        let x = self.norm1.forward(&self.reduce.forward(x)?)?;
        Ok(self.norm2.forward(&self.mix.forward(&x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    cfg: EncoderConfig,
    patch_embed: Conv2d,
    pos_embed: Tensor,
    blocks: Vec<TransformerBlock>,
    neck: Neck,
    multiscale: bool,
}

impl ImageEncoder {
    /// `multiscale = false` is single-layer mode: only the final block is tapped.
    pub fn new(cfg: &EncoderConfig, multiscale: bool, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let patch_embed = candle_nn::conv2d(
            cfg.in_channels,
            cfg.embed_dim,
            p,
            Conv2dConfig {
                stride: p,
                ..Default::default()
            },
            vb.pp("patch_embed"),
        )?;
        let g = cfg.grid();
        let pos_embed = vb.get_with_hints(
            (1, g * g, cfg.embed_dim),
            "pos_embed",
            Init::Randn {
                mean: 0.0,
                stdev: 0.02,
            },
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, vb.pp(format!("blocks.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            pos_embed,
            blocks,
            neck: Neck::new(cfg.embed_dim, cfg.neck_dim, vb.pp("neck"))?,
            multiscale,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn is_multiscale(&self) -> bool {
        self.multiscale
    }

    pub fn neck(&self) -> &Neck {
        &self.neck
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let s = self.cfg.image_size;
        let ok = matches!(images.dims(), [_, c, h, w] if *c == self.cfg.in_channels && *h == s && *w == s);
        if !ok {
            return Err(Error::shape(format!(
                "encoder expects [batch, {}, {s}, {s}] images, got {:?}",
                self.cfg.in_channels,
                images.dims()
            )));
        }
        Ok(())
    }

    /// Patch tokens with positional embeddings, `[B, G², embed_dim]`.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images)?;
        let x = self.patch_embed.forward(images)?;
        let x = x.flatten_from(2)?.transpose(1, 2)?;
        Ok(x.broadcast_add(&self.pos_embed)?)
    }

    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let mut x = self.patchify(images)?;
        let depth = self.blocks.len();
        let first_tap = if self.multiscale {
            depth - self.cfg.num_tap_layers
        } else {
            depth - 1
        };
        let g = self.cfg.grid();
        let mut taps = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, None)?;
            if i >= first_tap {
                let (b, _, d) = x.dims3()?;
                let map = x.transpose(1, 2)?.reshape((b, d, g, g))?;
                taps.push(self.neck.forward(&map)?);
            }
        }
        let mut fused = taps[0].clone();
        for t in &taps[1..] {
            fused = (fused + t)?;
        }
        Ok(FeaturePyramid { taps, fused })
    }
}
