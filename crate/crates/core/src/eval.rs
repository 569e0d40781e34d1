//! Batched inference and metric reports over slice samples.

use std::collections::BTreeMap;

use candle_core::DType;
use ndarray::Array2;
use omtsam_metrics::{aggregate, dsc, evaluate as score, MetricReport, Spacing, Summary};
use serde::{Deserialize, Serialize};

use crate::config::MetricsConfig;
use crate::data::{SliceSample, SynthImage};
use crate::decoder::{binarize, upsample};
use crate::error::{Error, Result};
use crate::model::{OmtSam, PromptBundle};
use crate::train::{batch_tensors, training_prompt, PromptMode};

const INFERENCE_BATCH: usize = 16;

/// The deterministic evaluation prompt: tight box and/or the sample's text.
pub fn eval_prompt(sample: &SliceSample, mode: PromptMode) -> Result<PromptBundle> {
    // Zero jitter never draws from the generator.
    let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    training_prompt(sample, mode, 0.0, &mut unused)
}

/// Predicted masks at each sample's own resolution.
pub fn predict_masks(
    model: &OmtSam,
    samples: &[SliceSample],
    prompts: &[PromptBundle],
    threshold: f32,
) -> Result<Vec<Array2<bool>>> {
    if samples.len() != prompts.len() {
        return Err(Error::shape(format!("{} samples but {} prompts", samples.len(), prompts.len())));
    }
    let s = model.image_size();
    let mut out = Vec::with_capacity(samples.len());
    let pairs: Vec<(&SliceSample, &PromptBundle)> = samples.iter().zip(prompts).collect();
    for chunk in pairs.chunks(INFERENCE_BATCH) {
        if chunk.iter().any(|(smp, _)| smp.image.dim() != (s, s)) {
            for (smp, p) in chunk {
                out.push(model.segment(&smp.image, p, threshold)?.mask);
            }
            continue;
        }
        let refs: Vec<&SliceSample> = chunk.iter().map(|(smp, _)| *smp).collect();
        let (images, _, _) = batch_tensors(model, &refs)?;
        let prompts: Vec<PromptBundle> = chunk.iter().map(|(_, p)| (*p).clone()).collect();
        let logits = model.forward(&images, &prompts)?;
        let full = upsample(&logits.low_res, (s, s))?.to_dtype(DType::F32)?;
        for row in full.to_vec3::<f32>()? {
            let flat: Vec<f32> = row.into_iter().flatten().collect();
            let arr = Array2::from_shape_vec((s, s), flat).map_err(|e| Error::shape(e.to_string()))?;
            out.push(binarize(&arr, threshold));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub organ: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompt_mode: PromptMode,
    pub overall: Summary,
    /// Organ (or shape) name to summary.
    pub per_organ: BTreeMap<String, Summary>,
    pub records: Vec<SampleRecord>,
}

/// Scores `predictions` against the samples' masks.
pub fn report_from_predictions(
    samples: &[SliceSample],
    predictions: &[Array2<bool>],
    mode: PromptMode,
    cfg: &MetricsConfig,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(samples.len());
    for (smp, pred) in samples.iter().zip(predictions) {
        records.push(SampleRecord {
            id: smp.id(),
            organ: smp.organ_name.clone(),
            report: score(pred.view(), smp.mask.view(), cfg.nsd_tolerance, Spacing::UNIT)?,
        });
    }
    let mut reports: Vec<MetricReport> = records.iter().map(|r| r.report.clone()).collect();
    let overall = aggregate(&mut reports, cfg.exclusion_threshold)?;
    for (rec, rep) in records.iter_mut().zip(reports) {
        rec.report = rep;
    }
    let mut per_organ = BTreeMap::new();
    let organs: std::collections::BTreeSet<&str> = records.iter().map(|r| r.organ.as_str()).collect();
    for organ in organs {
        let mut group: Vec<MetricReport> =
            records.iter().filter(|r| r.organ == organ).map(|r| r.report.clone()).collect();
        per_organ.insert(organ.to_string(), aggregate(&mut group, cfg.exclusion_threshold)?);
    }
    Ok(EvalReport {
        prompt_mode: mode,
        overall,
        per_organ,
        records,
    })
}

pub fn evaluate(model: &OmtSam, samples: &[SliceSample], mode: PromptMode, cfg: &MetricsConfig) -> Result<EvalReport> {
    let prompts = samples.iter().map(|s| eval_prompt(s, mode)).collect::<Result<Vec<_>>>()?;
    let preds = predict_masks(model, samples, &prompts, cfg.logit_threshold as f32)?;
    report_from_predictions(samples, &preds, mode, cfg)
}

/// Text-only target selection on two-shape images: mean DSC of each
/// prediction against the named shape and against the other shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionScores {
    pub named_dsc: f64,
    pub distractor_dsc: f64,
    pub n: usize,
}

pub fn selection_scores(model: &OmtSam, images: &[SynthImage], threshold: f32) -> Result<SelectionScores> {
    let mut samples = Vec::with_capacity(2 * images.len());
    let mut distractors = Vec::with_capacity(2 * images.len());
    for img in images {
        let [a, b] = img.samples();
        distractors.push(b.mask.clone());
        distractors.push(a.mask.clone());
        samples.push(a);
        samples.push(b);
    }
    let prompts = samples.iter().map(|s| eval_prompt(s, PromptMode::Text)).collect::<Result<Vec<_>>>()?;
    let preds = predict_masks(model, &samples, &prompts, threshold)?;
    let n = samples.len();
    let mut named = 0.0;
    let mut other = 0.0;
    for ((pred, smp), dis) in preds.iter().zip(&samples).zip(&distractors) {
        named += dsc(pred.view(), smp.mask.view())?;
        other += dsc(pred.view(), dis.view())?;
    }
    Ok(SelectionScores {
        named_dsc: named / n as f64,
        distractor_dsc: other / n as f64,
        n,
    })
}
