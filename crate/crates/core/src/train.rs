//! Adam training loop over slice samples.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{LossConfig, PromptSchedule, TrainConfig};
use crate::data::{mask_bbox, resize_mask, SliceSample};
use crate::error::{Error, Result};
use crate::loss::{loss_terms, sigmoid};
use crate::model::{OmtSam, PromptBundle};
use crate::prompt::BoxPrompt;

pub const LOG_FILE: &str = "train_log.jsonl";

/// Prompt combination used for one training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Box,
    Text,
    BoxText,
    SilentText,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [PromptMode::Box, PromptMode::Text, PromptMode::BoxText, PromptMode::SilentText];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Box => "box",
            PromptMode::Text => "text",
            PromptMode::BoxText => "box_text",
            PromptMode::SilentText => "silent_text",
        }
    }

    pub fn uses_box(self) -> bool {
        matches!(self, PromptMode::Box | PromptMode::BoxText)
    }

    pub fn uses_text(self) -> bool {
        !matches!(self, PromptMode::Box)
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::validation("prompt_mode", format!("unknown prompt mode `{s}`")))
    }
}

impl PromptSchedule {
    fn weights(&self) -> [f64; 4] {
        [self.boxes, self.text, self.box_text, self.silent_text]
    }

    pub fn sample(&self, rng: &mut impl Rng) -> PromptMode {
        let w = self.weights();
        let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
        for (mode, weight) in PromptMode::ALL.into_iter().zip(w) {
            if u < weight {
                return mode;
            }
            u -= weight;
        }
        *PromptMode::ALL.iter().rev().find(|m| w[**m as usize] > 0.0).expect("positive weight")
    }
}

/// Tight box around `mask`, each edge moved by up to `jitter` pixels.
pub fn jittered_box(mask: &Array2<bool>, jitter: f64, rng: &mut impl Rng) -> Result<BoxPrompt> {
    let (h, w) = mask.dim();
    let (x0, y0, x1, y1) = mask_bbox(mask).ok_or_else(|| Error::validation("mask", "mask has no foreground"))?;
    let tight = BoxPrompt::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)?;
    if jitter == 0.0 {
        return Ok(tight);
    }
    let mut j = |v: usize, hi: usize| (v as f64 + rng.random_range(-jitter..=jitter)).clamp(0.0, hi as f64);
    let (a, b, c, d) = (j(x0, w), j(y0, h), j(x1, w), j(y1, h));
    Ok(BoxPrompt::new(a, b, c, d).unwrap_or(tight))
}

/// The training prompt for `sample` under `mode`.
pub fn training_prompt(sample: &SliceSample, mode: PromptMode, jitter: f64, rng: &mut impl Rng) -> Result<PromptBundle> {
    let mut p = PromptBundle::default();
    if mode.uses_box() {
        p.boxes.push(jittered_box(&sample.mask, jitter, rng)?);
    }
    if mode.uses_text() {
        p.text = Some(sample.text_prompt.clone());
    }
    Ok(p)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub dice_term: f64,
    pub bce_term: f64,
    pub prompt_mode: PromptMode,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub records: Vec<StepRecord>,
    /// Data-order RNG after the last step.
    pub rng: ChaCha8Rng,
    /// Final checkpoint, when a run directory was given.
    pub checkpoint: Option<PathBuf>,
}

impl FitReport {
    pub fn steps(&self) -> usize {
        self.records.len()
    }
}

/// Images `[B, 1, S, S]` and targets `[B, S, S]` at the model resolution.
pub fn batch_tensors(model: &OmtSam, samples: &[&SliceSample]) -> Result<(Tensor, Tensor, Vec<Array2<bool>>)> {
    let s = model.image_size();
    let mut images = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for sample in samples {
        let (h, w) = sample.image.dim();
        let img = Tensor::from_vec(sample.image.iter().copied().collect::<Vec<f32>>(), (1, 1, h, w), model.device())?;
        images.push(crate::nn::resize_bilinear(&img, s, s)?);
        masks.push(resize_mask(&sample.mask, s, s));
    }
    let images = Tensor::cat(&images, 0)?.to_dtype(model.dtype())?;
    let target: Vec<f32> = masks.iter().flat_map(|m| m.iter().map(|&v| f32::from(u8::from(v)))).collect();
    let target = Tensor::from_vec(target, (samples.len(), s, s), model.device())?.to_dtype(model.dtype())?;
    Ok((images, target, masks))
}

fn trainable(model: &OmtSam, freeze: &[String]) -> Vec<Var> {
    let mut prefixes: Vec<String> = freeze.to_vec();
    if model.config().prompt.freeze_context_encoders {
        prefixes.push("imagetext.context.".into());
        prefixes.push("imagetext.text.".into());
    }
    model
        .params()
        .vars()
        .into_iter()
        .filter(|(name, _)| !prefixes.iter().any(|p| name.starts_with(p.as_str())))
        .map(|(_, v)| v)
        .collect()
}

/// Trains `model` in place for `epochs × ⌈N / batch⌉` steps (capped by
/// `max_steps`). With a run directory, the per-step log is appended to
/// `train_log.jsonl` there and checkpoints are written as `ckpt_<step>`.
pub fn fit(
    model: &OmtSam,
    samples: &[SliceSample],
    train: &TrainConfig,
    loss: &LossConfig,
    run_dir: Option<&Path>,
) -> Result<FitReport> {
    train.validate()?;
    loss.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if train.ablation != model.ablation() {
        return Err(Error::Config(format!(
            "model was built for `{}` but training asks for `{}`",
            model.ablation(),
            train.ablation
        )));
    }
    let vars = trainable(model, &train.freeze);
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: train.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut log = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let f = File::options().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(f), path))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut records = Vec::new();
    let mut checkpoint_path = None;
    let limit = if train.max_steps == 0 { usize::MAX } else { train.max_steps };
    'epochs: for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            if records.len() >= limit {
                break 'epochs;
            }
            let step = records.len() + 1;
            let batch: Vec<&SliceSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mode = train.prompt_mode_schedule.sample(&mut rng);
            let (images, target, masks) = batch_tensors(model, &batch)?;
            let prompts = batch
                .iter()
                .zip(&masks)
                .map(|(s, m)| {
                    let resized = SliceSample {
                        mask: m.clone(),
                        ..(*s).clone()
                    };
                    training_prompt(&resized, mode, train.box_jitter, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let logits = model.forward(&images, &prompts)?;
            let terms = loss_terms(&sigmoid(&logits.full_res)?, &target, loss)?;
            let values = terms.values()?;
            if !values.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch: batch.iter().map(|s| s.id()).collect(),
                });
            }
            opt.backward_step(&terms.total)?;
            let record = StepRecord {
                step,
                epoch,
                loss: values.total,
                dice_term: values.dice,
                bce_term: values.bce,
                prompt_mode: mode,
            };
            if let Some((w, path)) = log.as_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n").map_err(|e| Error::io(path.as_path(), e))?;
            }
            records.push(record);
            if let Some(dir) = run_dir {
                if train.checkpoint_every > 0 && step % train.checkpoint_every == 0 {
                    checkpoint_path = Some(checkpoint::save(model, dir, step, Some(&rng))?);
                }
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = run_dir {
        let last = records.len();
        let already = train.checkpoint_every > 0 && last > 0 && last % train.checkpoint_every == 0;
        if !already {
            checkpoint_path = Some(checkpoint::save(model, dir, last, Some(&rng))?);
        }
    }
    Ok(FitReport {
        records,
        rng,
        checkpoint: checkpoint_path,
    })
}

/// Model dtype for a configured precision.
pub fn dtype_for(precision: crate::config::Precision) -> DType {
    match precision {
        crate::config::Precision::F32 => DType::F32,
        crate::config::Precision::F64 => DType::F64,
    }
}
