//! Trains and scores the architectural variants under shared seeds.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, ExperimentConfig};
use crate::data::{SliceSample, SynthImage};
use crate::error::Result;
use crate::eval::{evaluate, selection_scores, EvalReport, SelectionScores};
use crate::model::OmtSam;
use crate::train::{dtype_for, fit, PromptMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub eval: EvalReport,
    /// Present when two-shape images were supplied.
    pub selection: Option<SelectionScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub prompt_mode: PromptMode,
    pub rows: Vec<AblationRow>,
}

fn label(v: Ablation) -> &'static str {
    match v {
        Ablation::Full => "Full model",
        Ablation::NoMultiscale => "Without multi-feature",
        Ablation::NoText => "Without image-text encoder",
    }
}

impl AblationReport {
    pub fn row(&self, variant: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Experiment | Mean DSC | Mean NSD | Mean HD95, one row per variant.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let fmt = |s: Option<omtsam_metrics::Stat>| s.map_or("n/a".to_string(), |s| format!("{:.3}", s.mean));
        let _ = writeln!(out, "| Experiment | Mean DSC | Mean NSD | Mean HD95 | Target DSC | Distractor DSC |");
        let _ = writeln!(out, "|---|---|---|---|---|---|");
        for r in &self.rows {
            let o = &r.eval.overall;
            let (named, other) = r
                .selection
                .map_or(("n/a".into(), "n/a".into()), |s| (format!("{:.3}", s.named_dsc), format!("{:.3}", s.distractor_dsc)));
            let _ = writeln!(
                out,
                "| {} (`{}`) | {} | {} | {} | {named} | {other} |",
                label(r.variant),
                r.variant,
                fmt(o.dsc),
                fmt(o.nsd),
                fmt(o.hd95)
            );
        }
        out
    }
}

/// Trains one model per variant from the same init seed, data order and
/// prompt schedule, then scores each on `test` with `mode` prompts. With
/// `out_dir`, each variant's run (log and final checkpoint) goes to
/// `out_dir/<variant>`.
pub fn run_ablation(
    base: &ExperimentConfig,
    variants: &[Ablation],
    train: &[SliceSample],
    test: &[SliceSample],
    selection: Option<&[SynthImage]>,
    mode: PromptMode,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.train.ablation = variant;
        cfg.name = format!("{}-{}", base.name, variant);
        let model = OmtSam::new(&cfg, dtype_for(cfg.train.precision))?;
        let run_dir = out_dir.map(|d| d.join(variant.as_str()));
        let fitted = fit(&model, train, &cfg.train, &cfg.loss, run_dir.as_deref())?;
        log::info!("{variant}: {} steps", fitted.steps());
        let eval = evaluate(&model, test, mode, &cfg.metrics)?;
        let selection = match selection {
            Some(images) => Some(selection_scores(&model, images, cfg.metrics.logit_threshold as f32)?),
            None => None,
        };
        rows.push(AblationRow {
            variant,
            steps: fitted.steps(),
            final_loss: fitted.records.last().map(|r| r.loss),
            eval,
            selection,
        });
    }
    Ok(AblationReport { prompt_mode: mode, rows })
}
