use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::config::{Ablation, ExperimentConfig};
use crate::decoder::{binarize, upsample, MaskDecoder};
use crate::encoder::{FeaturePyramid, ImageEncoder};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prompt::{BoxPrompt, GeometricPromptEncoder, ImageTextPromptEncoder, PointPrompt, Tokenizer};

/// Everything a user can prompt with for one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptBundle {
    pub points: Vec<PointPrompt>,
    pub boxes: Vec<BoxPrompt>,
    pub mask: Option<Array2<f32>>,
    pub text: Option<String>,
}

impl PromptBundle {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            ..Default::default()
        }
    }

    pub fn has_geometry(&self) -> bool {
        !self.points.is_empty() || !self.boxes.is_empty() || self.mask.is_some()
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for p in &self.points {
            p.validate(height, width)?;
        }
        for b in &self.boxes {
            b.validate(height, width)?;
        }
        if let Some(m) = &self.mask {
            if m.dim() != (height, width) {
                return Err(Error::validation(
                    "mask",
                    format!("mask prompt is {:?}, image is {height}x{width}", m.dim()),
                ));
            }
        }
        if let Some(t) = &self.text {
            if t.trim().is_empty() {
                return Err(Error::validation("text", "prompt text is empty"));
            }
        }
        Ok(())
    }

    /// Rescales coordinates from an `(h, w)` image to `(new_h, new_w)`.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> Self {
        let sy = to.0 as f64 / from.0 as f64;
        let sx = to.1 as f64 / from.1 as f64;
        Self {
            points: self
                .points
                .iter()
                .map(|p| PointPrompt::new(p.x * sx, p.y * sy, p.label))
                .collect(),
            boxes: self.boxes.iter().map(|b| b.scaled(sx, sy)).collect(),
            mask: self.mask.clone(),
            text: self.text.clone(),
        }
    }
}

/// Low-resolution candidate logits `[B, G·u, G·u]` and full-resolution logits `[B, H, W]`.
#[derive(Debug, Clone)]
pub struct MaskLogits {
    pub low_res: Tensor,
    pub full_res: Tensor,
}

/// Result of segmenting a single image at its own resolution.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub logits: Array2<f32>,
    pub mask: Array2<bool>,
}

#[derive(Debug)]
pub struct OmtSam {
    config: ExperimentConfig,
    store: ParamStore,
    dtype: DType,
    device: Device,
    tokenizer: Arc<Tokenizer>,
    encoder: ImageEncoder,
    geometric: GeometricPromptEncoder,
    imagetext: ImageTextPromptEncoder,
    decoder: MaskDecoder,
}

/// Samples that can share one decoder call.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    sparse: usize,
    text: usize,
    mask: bool,
}

impl OmtSam {
    /// Builds a freshly initialized model. The ablation variant comes from
    /// `config.train.ablation`; initialization is seeded by `config.seed`.
    pub fn new(config: &ExperimentConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let store = ParamStore::new(config.seed);
        let vb = store.var_builder(dtype, &device);
        let tokenizer = Arc::new(Tokenizer::builtin());
        let enc = &config.encoder;
        let dim = enc.neck_dim;
        let multiscale = config.train.ablation != Ablation::NoMultiscale;
        Ok(Self {
            encoder: ImageEncoder::new(enc, multiscale, vb.pp("encoder"))?,
            geometric: GeometricPromptEncoder::new(
                enc.image_size,
                enc.patch_size,
                dim,
                config.prompt.fourier_scale,
                config.seed,
                vb.pp("geometric"),
            )?,
            imagetext: ImageTextPromptEncoder::new(
                &config.prompt,
                enc.in_channels,
                tokenizer.vocab_size(),
                dim,
                vb.pp("imagetext"),
            )?,
            decoder: MaskDecoder::new(dim, &config.decoder, vb.pp("decoder"))?,
            config: config.clone(),
            store,
            dtype,
            device,
            tokenizer,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn ablation(&self) -> Ablation {
        self.config.train.ablation
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn encoder(&self) -> &ImageEncoder {
        &self.encoder
    }

    pub fn geometric(&self) -> &GeometricPromptEncoder {
        &self.geometric
    }

    pub fn imagetext(&self) -> &ImageTextPromptEncoder {
        &self.imagetext
    }

    pub fn decoder(&self) -> &MaskDecoder {
        &self.decoder
    }

    pub fn image_size(&self) -> usize {
        self.config.encoder.image_size
    }

    /// Side length of the low-resolution candidate logits.
    pub fn low_res_size(&self) -> usize {
        self.config.encoder.grid() * self.config.decoder.upscale_factor
    }

    pub fn uses_text(&self) -> bool {
        self.ablation() != Ablation::NoText
    }

    /// Stacks `[H, W]` images into a `[B, 1, H, W]` tensor of the model dtype.
    pub fn images_to_tensor(&self, images: &[&Array2<f32>]) -> Result<Tensor> {
        let s = self.image_size();
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.dim() != (s, s) {
                return Err(Error::shape(format!(
                    "expected {s}x{s} images, got {:?}",
                    img.dim()
                )));
            }
            data.extend(img.iter().copied());
        }
        Ok(Tensor::from_vec(data, (images.len(), 1, s, s), &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn encode_image(&self, images: &Tensor) -> Result<FeaturePyramid> {
        self.encoder.encode(images)
    }

    fn text_ids(&self, prompt: &PromptBundle) -> Result<Option<Vec<u32>>> {
        match (&prompt.text, self.uses_text()) {
            (Some(t), true) => Ok(Some(self.tokenizer.encode(t, self.config.prompt.text_max_len)?)),
            _ => Ok(None),
        }
    }

    /// Runs the full model on a batch of `[B, 1, S, S]` images with one
    /// prompt bundle per image.
    pub fn forward(&self, images: &Tensor, prompts: &[PromptBundle]) -> Result<MaskLogits> {
        let s = self.image_size();
        let b = images.dim(0)?;
        if prompts.len() != b {
            return Err(Error::shape(format!("{b} images but {} prompt bundles", prompts.len())));
        }
        for p in prompts {
            p.validate(s, s)?;
            if p.mask.is_some() && !self.config.prompt.enable_mask_prompt {
                return Err(Error::validation("mask", "mask prompts are disabled (prompt.enable_mask_prompt)"));
            }
        }
        let image_emb = self.encoder.encode(images)?.fused;

        let ids: Vec<Option<Vec<u32>>> = prompts.iter().map(|p| self.text_ids(p)).collect::<Result<_>>()?;
        let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
        for (i, p) in prompts.iter().enumerate() {
            let sparse = if p.points.is_empty() && p.boxes.is_empty() {
                1
            } else {
                p.points.len() + 2 * p.boxes.len()
            };
            let key = GroupKey {
                sparse,
                text: ids[i].as_ref().map_or(0, |v| v.len()),
                mask: p.mask.is_some(),
            };
            groups.entry(key).or_default().push(i);
        }

        let dense_pe = self.geometric.dense_pe();
        let mut order = Vec::with_capacity(b);
        let mut outputs = Vec::with_capacity(groups.len());
        for (key, members) in groups {
            let idx = Tensor::from_vec(members.iter().map(|&i| i as u32).collect::<Vec<_>>(), members.len(), &self.device)?;
            let emb = image_emb.index_select(&idx, 0)?;
            let mut sparse = Vec::with_capacity(members.len());
            let mut dense = Vec::with_capacity(members.len());
            for &i in &members {
                let p = &prompts[i];
                let mask = match &p.mask {
                    Some(m) => Some(Tensor::from_vec(m.iter().copied().collect::<Vec<f32>>(), (s, s), &self.device)?),
                    None => None,
                };
                let g = self.geometric.encode(&p.points, &p.boxes, mask.as_ref())?;
                sparse.push(g.sparse);
                dense.push(g.dense);
            }
            let mut tokens = Tensor::stack(&sparse, 0)?;
            if key.text > 0 {
                let flat: Vec<u32> = members.iter().flat_map(|&i| ids[i].clone().unwrap_or_default()).collect();
                let ids = Tensor::from_vec(flat, (members.len(), key.text), &self.device)?;
                let imgs = images.index_select(&idx, 0)?;
                let fused = self.imagetext.forward(&imgs, &ids)?;
                tokens = Tensor::cat(&[&tokens, &fused.tokens], 1)?;
            }
            let dense = Tensor::stack(&dense, 0)?;
            outputs.push(self.decoder.decode(&emb, &tokens, &dense, dense_pe)?);
            order.extend(members);
        }
        let low = Tensor::cat(&outputs, 0)?;
        let mut inverse = vec![0u32; b];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos as u32;
        }
        let inverse = Tensor::from_vec(inverse, b, &self.device)?;
        let low_res = low.index_select(&inverse, 0)?;
        let full_res = upsample(&low_res, (s, s))?;
        Ok(MaskLogits { low_res, full_res })
    }

    /// Segments one `[H, W]` image of any size. The image is resampled to
    /// the model resolution, prompts are rescaled with it, and the logits are
    /// resampled back to `H×W`.
    pub fn segment(&self, image: &Array2<f32>, prompt: &PromptBundle, threshold: f32) -> Result<Segmentation> {
        let (h, w) = image.dim();
        if h == 0 || w == 0 {
            return Err(Error::validation("image", "image is empty"));
        }
        prompt.validate(h, w)?;
        let s = self.image_size();
        let low = self.low_res_size();
        if h < low || w < low {
            return Err(Error::validation(
                "image",
                format!("image {h}x{w} is smaller than the {low}x{low} candidate mask"),
            ));
        }
        let t = Tensor::from_vec(image.iter().copied().collect::<Vec<f32>>(), (1, 1, h, w), &self.device)?
            .to_dtype(self.dtype)?;
        let t = crate::nn::resize_bilinear(&t, s, s)?;
        let prompt = if (h, w) == (s, s) {
            prompt.clone()
        } else {
            if prompt.mask.is_some() {
                return Err(Error::validation("mask", "mask prompts require model-resolution images"));
            }
            prompt.rescaled((h, w), (s, s))
        };
        let out = self.forward(&t, std::slice::from_ref(&prompt))?;
        let full = upsample(&out.low_res, (h, w))?.squeeze(0)?.to_dtype(DType::F32)?;
        let logits = Array2::from_shape_vec((h, w), full.flatten_all()?.to_vec1::<f32>()?)
            .map_err(|e| Error::shape(e.to_string()))?;
        let mask = binarize(&logits, threshold);
        Ok(Segmentation { logits, mask })
    }
}
