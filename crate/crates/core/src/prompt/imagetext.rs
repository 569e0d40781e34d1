//! Image-text prompt encoder.
//!
//! A small dual encoder maps the input image (resized to the context
//! resolution) and the tokenized text prompt into a shared width. A
//! cross-attention layer then lets every text token attend over the image
//! patch tokens; the residual sum is normalized and projected to the
//! decoder's token width, giving one fused prompt token per text token.
//!
//! [`CrossFusion::forward`] accepts any aligned embeddings, so embeddings
//! produced by an external image/text model can be fused the same way.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Embedding, Init, VarBuilder};

use crate::config::PromptConfig;
use crate::error::{Error, Result};
use crate::nn::{causal_mask, linear, resize_bilinear, Attention, LayerNorm, Linear, TransformerBlock};

/// Image patch tokens `[B, M, d]` and text tokens `[B, T, d]` of a shared width.
#[derive(Debug, Clone)]
pub struct AlignedEmbeddings {
    pub image_tokens: Tensor,
    pub text_tokens: Tensor,
}

/// One fused token per text token, `[B, T, token_dim]`.
#[derive(Debug, Clone)]
pub struct FusedPromptTokens {
    pub tokens: Tensor,
}

#[derive(Debug, Clone)]
pub struct ContextImageEncoder {
    patch_embed: Conv2d,
    pos_embed: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    size: usize,
}

impl ContextImageEncoder {
    pub fn new(cfg: &PromptConfig, in_channels: usize, vb: VarBuilder) -> Result<Self> {
        let m = (cfg.context_image_size / cfg.context_patch).pow(2);
        let patch_embed = candle_nn::conv2d(
            in_channels,
            cfg.clip_dim,
            cfg.context_patch,
            Conv2dConfig {
                stride: cfg.context_patch,
                ..Default::default()
            },
            vb.pp("patch_embed"),
        )?;
        Ok(Self {
            patch_embed,
            pos_embed: vb.get_with_hints(
                (1, m, cfg.clip_dim),
                "pos_embed",
                Init::Randn {
                    mean: 0.0,
                    stdev: 0.02,
                },
            )?,
            blocks: (0..cfg.context_depth)
                .map(|i| TransformerBlock::new(cfg.clip_dim, cfg.clip_heads, 4, vb.pp(format!("blocks.{i}"))))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(cfg.clip_dim, 1e-5, vb.pp("norm"))?,
            size: cfg.context_image_size,
        })
    }

    /// `[B, ch, H, W]` at any resolution to `[B, M, d]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let x = resize_bilinear(images, self.size, self.size)?;
        let x = self.patch_embed.forward(&x)?.flatten_from(2)?.transpose(1, 2)?;
        let mut x = x.broadcast_add(&self.pos_embed)?;
        for b in &self.blocks {
            x = b.forward(&x, None)?;
        }
        Ok(self.norm.forward(&x)?)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    token_embed: Embedding,
    pos_embed: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(cfg: &PromptConfig, vocab_size: usize, vb: VarBuilder) -> Result<Self> {
        let init = Init::Randn {
            mean: 0.0,
            stdev: 0.02,
        };
        let table = vb.get_with_hints((vocab_size, cfg.clip_dim), "token_embed", init)?;
        Ok(Self {
            token_embed: Embedding::new(table, cfg.clip_dim),
            pos_embed: vb.get_with_hints((cfg.text_max_len, cfg.clip_dim), "pos_embed", init)?,
            blocks: (0..cfg.text_depth)
                .map(|i| TransformerBlock::new(cfg.clip_dim, cfg.clip_heads, 4, vb.pp(format!("blocks.{i}"))))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(cfg.clip_dim, 1e-5, vb.pp("norm"))?,
            max_len: cfg.text_max_len,
        })
    }

    /// Token ids `[B, T]` (u32) to causal contextual embeddings `[B, T, d]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (_, t) = ids.dims2()?;
        if t == 0 || t > self.max_len {
            return Err(Error::shape(format!(
                "text length {t} outside 1..={}",
                self.max_len
            )));
        }
        let x = self.token_embed.forward(ids)?;
        let mut x = x.broadcast_add(&self.pos_embed.narrow(0, 0, t)?)?;
        let mask = causal_mask(t, x.dtype(), x.device())?;
        for b in &self.blocks {
            x = b.forward(&x, Some(&mask))?;
        }
        Ok(self.norm.forward(&x)?)
    }
}

/// Text-query cross-attention over image tokens, residual, norm, projection.
#[derive(Debug, Clone)]
pub struct CrossFusion {
    attn: Attention,
    norm: LayerNorm,
    proj: Linear,
    dim: usize,
}

impl CrossFusion {
    pub fn new(clip_dim: usize, heads: usize, token_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(clip_dim, heads, 1, vb.pp("attn"))?,
            norm: LayerNorm::new(clip_dim, 1e-5, vb.pp("norm"))?,
            proj: linear(clip_dim, token_dim, vb.pp("proj"))?,
            dim: clip_dim,
        })
    }

    /// Returns fused tokens and the attention weights `[B, heads, T, M]`.
    pub fn forward_with_weights(&self, aligned: &AlignedEmbeddings) -> Result<(FusedPromptTokens, Tensor)> {
        let text = &aligned.text_tokens;
        let image = &aligned.image_tokens;
        let (bt, _, dt) = text.dims3()?;
        let (bi, _, di) = image.dims3()?;
        if dt != self.dim || di != self.dim || bt != bi {
            return Err(Error::shape(format!(
                "cross fusion expects [B, T, {0}] text and [B, M, {0}] image tokens, got {1:?} and {2:?}",
                self.dim,
                text.dims(),
                image.dims()
            )));
        }
        let (attended, weights) = self.attn.forward_with_weights(text, image, image, None)?;
        let fused = self.norm.forward(&(text + attended)?)?;
        Ok((
            FusedPromptTokens {
                tokens: self.proj.forward(&fused)?,
            },
            weights,
        ))
    }

    pub fn forward(&self, aligned: &AlignedEmbeddings) -> Result<FusedPromptTokens> {
        Ok(self.forward_with_weights(aligned)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct ImageTextPromptEncoder {
    pub context: ContextImageEncoder,
    pub text: TextEncoder,
    pub fusion: CrossFusion,
}

impl ImageTextPromptEncoder {
    pub fn new(
        cfg: &PromptConfig,
        in_channels: usize,
        vocab_size: usize,
        token_dim: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self {
            context: ContextImageEncoder::new(cfg, in_channels, vb.pp("context"))?,
            text: TextEncoder::new(cfg, vocab_size, vb.pp("text"))?,
            fusion: CrossFusion::new(cfg.clip_dim, cfg.fusion_heads, token_dim, vb.pp("fusion"))?,
        })
    }

    pub fn align(&self, images: &Tensor, ids: &Tensor) -> Result<AlignedEmbeddings> {
        Ok(AlignedEmbeddings {
            image_tokens: self.context.forward(images)?,
            text_tokens: self.text.forward(ids)?,
        })
    }

    pub fn forward(&self, images: &Tensor, ids: &Tensor) -> Result<FusedPromptTokens> {
        self.fusion.forward(&self.align(images, ids)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::prompt::Tokenizer;
    use candle_core::{DType, Device, D};

    fn build(store: &ParamStore) -> ImageTextPromptEncoder {
        let tok = Tokenizer::builtin();
        ImageTextPromptEncoder::new(
            &PromptConfig::default(),
            1,
            tok.vocab_size(),
            32,
            store.var_builder(DType::F64, &Device::Cpu),
        )
        .unwrap()
    }

    fn ids(text: &str) -> Tensor {
        let tok = Tokenizer::builtin();
        Tensor::new(tok.tokenize(text).unwrap(), &Device::Cpu).unwrap().unsqueeze(0).unwrap()
    }

    #[test]
    fn context_tokens_are_resolution_independent() {
        let enc = build(&ParamStore::new(0));
        let a = Tensor::rand(0.0f64, 1.0, (1, 1, 64, 64), &Device::Cpu).unwrap();
        let b = Tensor::rand(0.0f64, 1.0, (2, 1, 100, 37), &Device::Cpu).unwrap();
        assert_eq!(enc.context.forward(&a).unwrap().dims(), &[1, 49, 64]);
        assert_eq!(enc.context.forward(&b).unwrap().dims(), &[2, 49, 64]);
    }

    #[test]
    fn constant_image_without_positions_gives_identical_tokens() {
        let store = ParamStore::new(0);
        let enc = build(&store);
        store.zero_where(|n| n == "context.pos_embed").unwrap();
        let img = Tensor::full(0.4f64, (1, 1, 64, 64), &Device::Cpu).unwrap();
        let t = enc.context.forward(&img).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for row in &t[1..] {
            for (a, b) in row.iter().zip(&t[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn text_outputs_differ_only_from_the_organ_position_on() {
        let enc = build(&ParamStore::new(0));
        let a = enc.text.forward(&ids("segment the liver")).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let b = enc.text.forward(&ids("segment the spleen")).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a.len(), 5);
        // Causal: positions before the organ word are unaffected.
        assert_eq!(a[..3], b[..3]);
        assert_ne!(a[3], b[3]);
        let again = enc.text.forward(&ids("segment the liver")).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn fusion_shapes_and_softmax_rows() {
        let enc = build(&ParamStore::new(0));
        let img = Tensor::rand(0.0f64, 1.0, (1, 1, 64, 64), &Device::Cpu).unwrap();
        let aligned = enc.align(&img, &ids("segment the liver")).unwrap();
        let (fused, w) = enc.fusion.forward_with_weights(&aligned).unwrap();
        assert_eq!(fused.tokens.dims(), &[1, 5, 32]);
        assert_eq!(w.dims(), &[1, 4, 5, 49]);
        let sums = w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn fusion_rejects_mismatched_width() {
        let enc = build(&ParamStore::new(0));
        let aligned = AlignedEmbeddings {
            image_tokens: Tensor::zeros((1, 49, 48), DType::F64, &Device::Cpu).unwrap(),
            text_tokens: Tensor::zeros((1, 5, 64), DType::F64, &Device::Cpu).unwrap(),
        };
        assert!(matches!(enc.fusion.forward(&aligned), Err(Error::Shape(_))));
    }
}
