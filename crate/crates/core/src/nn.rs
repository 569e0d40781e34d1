//! Layer building blocks shared by the encoders and the decoder.
//!
//! Everything here is composed from primitive tensor ops that candle can
//! differentiate, so gradients flow to both weights and inputs.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Init, VarBuilder};

use crate::error::Result;

/// Fully connected layer over the last dimension. Leading dimensions are
/// folded into one so every call is a single 2D matrix product.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims();
        let (out_dim, in_dim) = self.weight.dims2()?;
        let rows = dims[..dims.len() - 1].iter().product::<usize>();
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut shape = dims.to_vec();
        *shape.last_mut().unwrap() = out_dim;
        y.reshape(shape)
    }
}

/// [`Linear`] with uniform `±1/sqrt(fan_in)` weights and biases.
pub fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let init = Init::Uniform {
        lo: -bound,
        up: bound,
    };
    let w = vb.get_with_hints((out_dim, in_dim), "weight", init)?;
    let b = vb.get_with_hints(out_dim, "bias", init)?;
    Ok(Linear::new(w, Some(b)))
}

/// Normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Normalization over the channel dimension of a `[B, C, H, W]` map.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(channels: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb
                .get_with_hints(channels, "weight", Init::Const(1.0))?
                .reshape((1, channels, 1, 1))?,
            bias: vb
                .get_with_hints(channels, "bias", Init::Const(0.0))?
                .reshape((1, channels, 1, 1))?,
            eps,
        })
    }
}

impl Module for LayerNorm2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Multi-head attention with separate query/key/value projections.
///
/// `internal_dim` may be smaller than the model width (attention
/// downsampling); the output projection maps back to the model width.
#[derive(Debug, Clone)]
pub struct Attention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    heads: usize,
    internal_dim: usize,
}

impl Attention {
    pub fn new(dim: usize, heads: usize, downsample: usize, vb: VarBuilder) -> Result<Self> {
        Self::with_kv_dim(dim, dim, heads, downsample, vb)
    }

    pub fn with_kv_dim(
        dim: usize,
        kv_dim: usize,
        heads: usize,
        downsample: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        let internal_dim = dim / downsample.max(1);
        if heads == 0 || internal_dim % heads != 0 {
            return Err(crate::Error::Config(format!(
                "attention width {internal_dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q_proj: linear(dim, internal_dim, vb.pp("q_proj"))?,
            k_proj: linear(kv_dim, internal_dim, vb.pp("k_proj"))?,
            v_proj: linear(kv_dim, internal_dim, vb.pp("v_proj"))?,
            out_proj: linear(internal_dim, dim, vb.pp("out_proj"))?,
            heads,
            internal_dim,
        })
    }

    fn split_heads(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        x.reshape((b, n, self.heads, self.internal_dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// Returns the attended output `[B, Nq, dim]` and the attention weights
    /// `[B, heads, Nq, Nk]`. `mask` is added to the scores before softmax.
    pub fn forward_with_weights(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&Tensor>,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let q = self.split_heads(&self.q_proj.forward(q)?)?;
        let k = self.split_heads(&self.k_proj.forward(k)?)?;
        let v = self.split_heads(&self.v_proj.forward(v)?)?;
        let scale = 1.0 / ((self.internal_dim / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask)?;
        }
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = weights.matmul(&v)?;
        let (b, _, n, _) = out.dims4()?;
        let out = out.transpose(1, 2)?.reshape((b, n, self.internal_dim))?;
        Ok((self.out_proj.forward(&out)?, weights))
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> candle_core::Result<Tensor> {
        Ok(self.forward_with_weights(q, k, v, None)?.0)
    }
}

/// `[n, n]` additive mask with `-inf` above the diagonal.
pub fn causal_mask(n: usize, dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
    let data: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| if j > i { f64::NEG_INFINITY } else { 0.0 }))
        .collect();
    Tensor::from_vec(data, (n, n), device)?.to_dtype(dtype)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(dim: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: linear(dim, hidden, vb.pp("fc1"))?,
            fc2: linear(hidden, dim, vb.pp("fc2"))?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim, 1e-6, vb.pp("norm1"))?,
            attn: Attention::new(dim, heads, 1, vb.pp("attn"))?,
            norm2: LayerNorm::new(dim, 1e-6, vb.pp("norm2"))?,
            mlp: Mlp::new(dim, dim * mlp_ratio, vb.pp("mlp"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let (a, _) = self.attn.forward_with_weights(&h, &h, &h, mask)?;
        let x = (x + a)?;
        let h = self.mlp.forward(&self.norm2.forward(&x)?)?;
        x + h
    }
}

/// Kernel-2, stride-2 transposed convolution `[B, Cin, H, W] -> [B, Cout, 2H, 2W]`.
///
/// Output windows do not overlap, so this is a per-pixel linear map followed
/// by a pixel shuffle.
#[derive(Debug, Clone)]
pub struct Upsample2x {
    weight: Tensor,
    bias: Tensor,
    out_channels: usize,
}

impl Upsample2x {
    pub fn new(in_channels: usize, out_channels: usize, vb: VarBuilder) -> Result<Self> {
        let bound = 1.0 / (in_channels as f64).sqrt();
        let init = Init::Uniform {
            lo: -bound,
            up: bound,
        };
        Ok(Self {
            weight: vb.get_with_hints((out_channels * 4, in_channels), "weight", init)?,
            bias: vb.get_with_hints((out_channels, 1, 1), "bias", init)?,
            out_channels,
        })
    }
}

impl Module for Upsample2x {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let y = x.permute((0, 2, 3, 1))?.contiguous()?.broadcast_matmul(&self.weight.t()?)?;
        y.reshape((b, h, w, self.out_channels, 2, 2))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((b, self.out_channels, 2 * h, 2 * w))?
            .broadcast_add(&self.bias)
    }
}

/// Source indices and weights for half-pixel bilinear resampling along one axis.
fn lerp_plan(in_len: usize, out_len: usize) -> (Vec<u32>, Vec<u32>, Vec<f64>) {
    let scale = in_len as f64 / out_len as f64;
    let mut lo = Vec::with_capacity(out_len);
    let mut hi = Vec::with_capacity(out_len);
    let mut t = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        lo.push(i0 as u32);
        hi.push(i1 as u32);
        t.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
    }
    (lo, hi, t)
}

fn resize_axis(x: &Tensor, dim: usize, out_len: usize) -> candle_core::Result<Tensor> {
    let in_len = x.dim(dim)?;
    if in_len == out_len {
        return Ok(x.clone());
    }
    let (lo, hi, t) = lerp_plan(in_len, out_len);
    let dev = x.device();
    let lo = Tensor::from_vec(lo, out_len, dev)?;
    let hi = Tensor::from_vec(hi, out_len, dev)?;
    let mut shape = vec![1usize; x.rank()];
    shape[dim] = out_len;
    let t = Tensor::from_vec(t, shape, dev)?.to_dtype(x.dtype())?;
    let a = x.index_select(&lo, dim)?;
    let b = x.index_select(&hi, dim)?;
    a.broadcast_add(&(b - &a)?.broadcast_mul(&t)?)
}

/// Bilinear resize of the last two dimensions (half-pixel centers).
///
/// Each axis is interpolated as `a + (b − a)·t`, which reproduces constant
/// inputs exactly and never leaves the range of the input values.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let rank = x.rank();
    let y = resize_axis(x, rank - 2, out_h)?;
    resize_axis(&y, rank - 1, out_w)
}
