use serde::{Deserialize, Serialize};

use crate::{MetricError, MetricReport, ReportFlag};

/// Reports scoring a DSC below this are left out of the means.
pub const DEFAULT_EXCLUSION_THRESHOLD: f64 = 0.1;

/// Mean and population standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stat {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub excluded: usize,
    pub exclusion_threshold: f64,
    /// Indices (into the input list) of reports left out of the means.
    pub excluded_indices: Vec<usize>,
    pub dsc: Option<Stat>,
    pub nsd: Option<Stat>,
    pub hd95: Option<Stat>,
    /// False when every report was excluded, leaving the means undefined.
    pub means_defined: bool,
}

/// Summarizes a list of reports, dropping entries whose DSC falls below
/// `exclusion_threshold` and flagging them `excluded_from_mean` in place.
pub fn aggregate(
    reports: &mut [MetricReport],
    exclusion_threshold: f64,
) -> Result<Summary, MetricError> {
    if reports.is_empty() {
        return Err(MetricError::NoReports);
    }
    let mut excluded_indices = Vec::new();
    let (mut dsc, mut nsd, mut hd) = (Vec::new(), Vec::new(), Vec::new());
    for (i, r) in reports.iter_mut().enumerate() {
        if r.dsc < exclusion_threshold {
            r.flags.insert(ReportFlag::ExcludedFromMean);
            excluded_indices.push(i);
            continue;
        }
        r.flags.remove(&ReportFlag::ExcludedFromMean);
        dsc.push(r.dsc);
        nsd.extend(r.nsd);
        hd.extend(r.hd95);
    }
    let dsc = Stat::of(&dsc);
    Ok(Summary {
        count: reports.len() - excluded_indices.len(),
        excluded: excluded_indices.len(),
        exclusion_threshold,
        excluded_indices,
        means_defined: dsc.is_some(),
        dsc,
        nsd: Stat::of(&nsd),
        hd95: Stat::of(&hd),
    })
}
