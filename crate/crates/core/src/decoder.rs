//! Two-way attention mask decoder.
//!
//! Prompt tokens (a learned output token, the geometric tokens, then the
//! fused text tokens) and the flattened image embedding update each other
//! through `depth` blocks of token self-attention, token-to-image
//! cross-attention, a token MLP and image-to-token cross-attention. The
//! image embedding is then upscaled by `upscale_factor` with transposed
//! convolutions and read out against the output token's final state, which
//! gives the low-resolution candidate logits. [`upsample`] brings those to
//! the input resolution.

use candle_core::{Module, Tensor};
use candle_nn::{Init, VarBuilder};
use ndarray::Array2;

use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::nn::{linear, resize_bilinear, Attention, LayerNorm, LayerNorm2d, Linear, Mlp, Upsample2x};

#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    image_to_token: Attention,
    norm4: LayerNorm,
}

impl TwoWayBlock {
    fn new(dim: usize, cfg: &DecoderConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(dim, cfg.heads, 1, vb.pp("self_attn"))?,
            norm1: LayerNorm::new(dim, 1e-5, vb.pp("norm1"))?,
            token_to_image: Attention::new(dim, cfg.heads, cfg.attention_downsample, vb.pp("token_to_image"))?,
            norm2: LayerNorm::new(dim, 1e-5, vb.pp("norm2"))?,
            mlp: Mlp::new(dim, cfg.mlp_dim, vb.pp("mlp"))?,
            norm3: LayerNorm::new(dim, 1e-5, vb.pp("norm3"))?,
            image_to_token: Attention::new(dim, cfg.heads, cfg.attention_downsample, vb.pp("image_to_token"))?,
            norm4: LayerNorm::new(dim, 1e-5, vb.pp("norm4"))?,
        })
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let q = (queries + query_pe)?;
        let queries = self.norm1.forward(&(queries + self.self_attn.forward(&q, &q, queries)?)?)?;

        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let queries = self.norm2.forward(&(&queries + self.token_to_image.forward(&q, &k, keys)?)?)?;

        let queries = self.norm3.forward(&(&queries + self.mlp.forward(&queries)?)?)?;

        let q = (&queries + query_pe)?;
        let keys = self.norm4.forward(&(keys + self.image_to_token.forward(&k, &q, &queries)?)?)?;
        Ok((queries, keys))
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    final_norm: LayerNorm,
    output_token: Tensor,
    upscale: Vec<(Upsample2x, Option<LayerNorm2d>)>,
    hyper: [Linear; 3],
    dim: usize,
    factor: usize,
}

impl MaskDecoder {
    pub fn new(dim: usize, cfg: &DecoderConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate(dim)?;
        let blocks = (0..cfg.depth)
            .map(|i| TwoWayBlock::new(dim, cfg, vb.pp(format!("blocks.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let stages = cfg.upscale_factor.trailing_zeros() as usize;
        let mut upscale = Vec::new();
        let mut ch = dim;
        for s in 0..stages {
            let out = if s == 0 { dim / 4 } else { ch / 2 };
            let up = Upsample2x::new(ch, out, vb.pp(format!("upscale.{s}.conv")))?;
            let norm = if s + 1 < stages {
                Some(LayerNorm2d::new(out, 1e-6, vb.pp(format!("upscale.{s}.norm")))?)
            } else {
                None
            };
            upscale.push((up, norm));
            ch = out;
        }
        let hyper = [
            linear(dim, dim, vb.pp("hyper.0"))?,
            linear(dim, dim, vb.pp("hyper.1"))?,
            linear(dim, ch, vb.pp("hyper.2"))?,
        ];
        Ok(Self {
            blocks,
            final_attn: Attention::new(dim, cfg.heads, cfg.attention_downsample, vb.pp("final_attn"))?,
            final_norm: LayerNorm::new(dim, 1e-5, vb.pp("final_norm"))?,
            output_token: vb.get_with_hints(
                (1, 1, dim),
                "output_token",
                Init::Randn {
                    mean: 0.0,
                    stdev: 1.0,
                },
            )?,
            upscale,
            hyper,
            dim,
            factor: cfg.upscale_factor,
        })
    }

    pub fn upscale_factor(&self) -> usize {
        self.factor
    }

    /// Low-resolution logits `[B, G·u, G·u]`.
    pub fn decode(
        &self,
        image: &Tensor,
        prompt_tokens: &Tensor,
        dense_prompt: &Tensor,
        dense_pe: &Tensor,
    ) -> Result<Tensor> {
        Ok(self.decode_with_token(image, prompt_tokens, dense_prompt, dense_pe)?.0)
    }

    /// Also returns the output token's final state `[B, D]`.
    pub fn decode_with_token(
        &self,
        image: &Tensor,
        prompt_tokens: &Tensor,
        dense_prompt: &Tensor,
        dense_pe: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (b, c, g, g2) = image.dims4()?;
        let (bt, n, d) = prompt_tokens.dims3()?;
        if c != self.dim || d != self.dim || g != g2 || bt != b || n == 0 {
            return Err(Error::shape(format!(
                "decoder expects [B, {0}, G, G] image and nonempty [B, K, {0}] tokens, got {1:?} and {2:?}",
                self.dim,
                image.dims(),
                prompt_tokens.dims()
            )));
        }
        if dense_prompt.dims() != image.dims() || dense_pe.dims() != [c, g, g] {
            return Err(Error::shape(format!(
                "dense prompt {:?} / positional map {:?} do not match image embedding {:?}",
                dense_prompt.dims(),
                dense_pe.dims(),
                image.dims()
            )));
        }

        let out_tok = self.output_token.broadcast_as((b, 1, d))?;
        let tokens = Tensor::cat(&[&out_tok, prompt_tokens], 1)?;
        let src = (image + dense_prompt)?;
        let keys0 = src.flatten_from(2)?.transpose(1, 2)?;
        let key_pe = dense_pe.flatten_from(1)?.t()?.unsqueeze(0)?;

        let mut queries = tokens.clone();
        let mut keys = keys0;
        for blk in &self.blocks {
            let (q, k) = blk.forward(&queries, &keys, &tokens, &key_pe)?;
            queries = q;
            keys = k;
        }
        let q = (&queries + &tokens)?;
        let k = keys.broadcast_add(&key_pe)?;
        let queries = self.final_norm.forward(&(&queries + self.final_attn.forward(&q, &k, &keys)?)?)?;

        let mut up = keys.transpose(1, 2)?.reshape((b, c, g, g))?;
        for (conv, norm) in &self.upscale {
            up = conv.forward(&up)?;
            if let Some(norm) = norm {
                up = norm.forward(&up)?;
            }
            up = up.gelu()?;
        }
        let (_, ch, h, w) = up.dims4()?;

        let state = queries.narrow(1, 0, 1)?.squeeze(1)?;
        let hyp = self.hyper[0].forward(&state)?.gelu()?;
        let hyp = self.hyper[1].forward(&hyp)?.gelu()?;
        let hyp = self.hyper[2].forward(&hyp)?;
        let logits = hyp
            .unsqueeze(1)?
            .matmul(&up.reshape((b, ch, h * w))?)?
            .reshape((b, h, w))?;
        Ok((logits, state))
    }
}

/// Bilinear resize of `[.., h, w]` logits to `(H, W)`; never shrinks.
pub fn upsample(low_res: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let rank = low_res.rank();
    if rank < 2 {
        return Err(Error::shape("logits must have at least two dimensions"));
    }
    let (h, w) = (low_res.dim(rank - 2)?, low_res.dim(rank - 1)?);
    if target.0 < h || target.1 < w {
        return Err(Error::validation(
            "target",
            format!("target {target:?} is smaller than the {h}x{w} low-resolution logits"),
        ));
    }
    Ok(resize_bilinear(low_res, target.0, target.1)?)
}

/// `logits > threshold`. A logit of 0 is probability 0.5.
pub fn binarize(logits: &Array2<f32>, threshold: f32) -> Array2<bool> {
    logits.mapv(|v| v > threshold)
}
