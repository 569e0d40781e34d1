//! Evaluation metrics for 2D binary segmentation masks.
//!
//! Three per-sample scores are provided:
//!
//! - [`dsc`]: Dice similarity coefficient, `2|A∩B| / (|A|+|B|)`.
//! - [`nsd`]: normalized surface distance, the fraction of boundary pixels of
//!   both masks lying within a tolerance `tau` of the other mask's boundary.
//! - [`hd95`]: the larger of the two directed 95th-percentile surface
//!   distances.
//!
//! Boundaries use 4-connectivity with out-of-bounds pixels counted as
//! background. Distances are Euclidean under an anisotropic pixel [`Spacing`].
//! [`aggregate`] implements the mean/std summary with low-DSC exclusion.

mod aggregate;
mod surface;

pub use aggregate::{aggregate, Stat, Summary, DEFAULT_EXCLUSION_THRESHOLD};
pub use surface::{boundary, directed_distances, percentile, Coord};

use std::collections::BTreeSet;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

/// Default NSD tolerance, in pixels (or mm when a physical spacing is used).
pub const DEFAULT_NSD_TOLERANCE: f64 = 1.0;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("mask shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{side} surface is empty")]
    EmptySurface { side: Side },
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("spacing components must be positive and finite, got ({row}, {col})")]
    InvalidSpacing { row: f64, col: f64 },
    #[error("cannot aggregate an empty report list")]
    NoReports,
}

/// Which argument of a two-mask metric a failure refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    First,
    Second,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::First => f.write_str("first"),
            Side::Second => f.write_str("second"),
        }
    }
}

/// Physical size of one pixel along rows (y) and columns (x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row: f64,
    pub col: f64,
}

impl Spacing {
    pub const UNIT: Spacing = Spacing { row: 1.0, col: 1.0 };

    pub fn new(row: f64, col: f64) -> Result<Self, MetricError> {
        if !(row > 0.0 && col > 0.0 && row.is_finite() && col.is_finite()) {
            return Err(MetricError::InvalidSpacing { row, col });
        }
        Ok(Self { row, col })
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::UNIT
    }
}

fn check_shapes(a: &ArrayView2<bool>, b: &ArrayView2<bool>) -> Result<(), MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::ShapeMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Dice similarity coefficient. Two empty masks score 1.0.
pub fn dsc(a: ArrayView2<bool>, b: ArrayView2<bool>) -> Result<f64, MetricError> {
    check_shapes(&a, &b)?;
    let mut inter = 0usize;
    let mut size_a = 0usize;
    let mut size_b = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        size_a += x as usize;
        size_b += y as usize;
        inter += (x && y) as usize;
    }
    if size_a + size_b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (size_a + size_b) as f64)
}

fn surfaces(
    a: ArrayView2<bool>,
    b: ArrayView2<bool>,
) -> Result<(Vec<Coord>, Vec<Coord>), MetricError> {
    check_shapes(&a, &b)?;
    let ba = boundary(a);
    if ba.is_empty() {
        return Err(MetricError::EmptySurface { side: Side::First });
    }
    let bb = boundary(b);
    if bb.is_empty() {
        return Err(MetricError::EmptySurface { side: Side::Second });
    }
    Ok((ba, bb))
}

/// Symmetric 95th-percentile Hausdorff distance.
pub fn hd95(a: ArrayView2<bool>, b: ArrayView2<bool>, spacing: Spacing) -> Result<f64, MetricError> {
    let (ba, bb) = surfaces(a, b)?;
    let ab = directed_distances(&ba, &bb, spacing)?;
    let ba_ = directed_distances(&bb, &ba, spacing)?;
    Ok(percentile(&ab, 95.0).max(percentile(&ba_, 95.0)))
}

/// Normalized surface distance at tolerance `tau`.
pub fn nsd(
    a: ArrayView2<bool>,
    b: ArrayView2<bool>,
    tau: f64,
    spacing: Spacing,
) -> Result<f64, MetricError> {
    if !(tau > 0.0) {
        return Err(MetricError::InvalidTolerance(tau));
    }
    let (ba, bb) = surfaces(a, b)?;
    let ab = directed_distances(&ba, &bb, spacing)?;
    let ba_ = directed_distances(&bb, &ba, spacing)?;
    let within = ab.iter().chain(ba_.iter()).filter(|&&d| d <= tau).count();
    Ok(within as f64 / (ab.len() + ba_.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFlag {
    EmptyPrediction,
    EmptyReference,
    ExcludedFromMean,
}

/// Per-sample scores. Surface metrics are absent when either mask is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub nsd: Option<f64>,
    pub hd95: Option<f64>,
    pub tau: f64,
    pub flags: BTreeSet<ReportFlag>,
}

impl MetricReport {
    pub fn is_excluded(&self) -> bool {
        self.flags.contains(&ReportFlag::ExcludedFromMean)
    }
}

/// Scores a prediction against a reference mask.
pub fn evaluate(
    prediction: ArrayView2<bool>,
    reference: ArrayView2<bool>,
    tau: f64,
    spacing: Spacing,
) -> Result<MetricReport, MetricError> {
    if !(tau > 0.0) {
        return Err(MetricError::InvalidTolerance(tau));
    }
    let dice = dsc(prediction, reference)?;
    let mut flags = BTreeSet::new();
    if !prediction.iter().any(|&v| v) {
        flags.insert(ReportFlag::EmptyPrediction);
    }
    if !reference.iter().any(|&v| v) {
        flags.insert(ReportFlag::EmptyReference);
    }
    let (nsd_v, hd_v) = if flags.is_empty() {
        (
            Some(nsd(prediction, reference, tau, spacing)?),
            Some(hd95(prediction, reference, spacing)?),
        )
    } else {
        (None, None)
    };
    Ok(MetricReport {
        dsc: dice,
        nsd: nsd_v,
        hd95: hd_v,
        tau,
        flags,
    })
}
