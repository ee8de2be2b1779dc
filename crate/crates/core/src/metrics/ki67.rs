//! Ki67 positivity: per-instance mean marker intensity against a threshold
//! chosen on validation and frozen for test.

use serde::{Deserialize, Serialize};

use super::instances::InstanceLabelMap;
use super::MetricError;
use crate::data::Split;
use crate::raster::Raster;

/// Number of evenly spaced candidate thresholds.
pub const TAU_GRID_POINTS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ki67Threshold {
    tau: f64,
    selected_on: Split,
    frozen: bool,
    /// Candidate range searched, `(lo, hi)`.
    pub grid: Option<(f64, f64)>,
}

impl Ki67Threshold {
    /// A threshold that has not been through validation selection.
    pub fn provisional(tau: f64) -> Self {
        Self {
            tau,
            selected_on: Split::Train,
            frozen: false,
            grid: None,
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn selected_on(&self) -> Split {
        self.selected_on
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<(), MetricError> {
        if self.frozen {
            return Err(MetricError::FrozenThreshold(self.tau));
        }
        self.tau = tau;
        Ok(())
    }

    /// The threshold value for test-split evaluation; only a frozen,
    /// validation-selected threshold qualifies.
    pub fn for_test(&self) -> Result<f64, MetricError> {
        if !self.frozen || self.selected_on != Split::Val {
            return Err(MetricError::UnfrozenThreshold);
        }
        Ok(self.tau)
    }
}

/// `f+ = (1/N) sum 1[mean_i > tau]` over instance means.
pub fn fraction_above(means: &[f64], tau: f64) -> Result<f64, MetricError> {
    if means.is_empty() {
        return Err(MetricError::UndefinedFraction);
    }
    Ok(means.iter().filter(|&&m| m > tau).count() as f64 / means.len() as f64)
}

pub fn ki67_fraction(instances: &InstanceLabelMap, marker: &Raster, tau: f64) -> Result<f64, MetricError> {
    if instances.n() == 0 {
        return Err(MetricError::UndefinedFraction);
    }
    fraction_above(&instances.instance_means(marker)?, tau)
}

/// `|f+_pred - f+_gt|` for one image, both read over the same ground-truth
/// instances.
pub fn ki67_error(
    pred_marker: &Raster,
    gt_marker: &Raster,
    instances: &InstanceLabelMap,
    tau: f64,
) -> Result<f64, MetricError> {
    Ok((ki67_fraction(instances, pred_marker, tau)? - ki67_fraction(instances, gt_marker, tau)?).abs())
}

/// Per-instance means for one validation image.
#[derive(Debug, Clone, PartialEq)]
pub struct Ki67Case {
    pub pred_means: Vec<f64>,
    pub gt_means: Vec<f64>,
}

impl Ki67Case {
    pub fn new(instances: &InstanceLabelMap, pred_marker: &Raster, gt_marker: &Raster) -> Result<Self, MetricError> {
        Ok(Self {
            pred_means: instances.instance_means(pred_marker)?,
            gt_means: instances.instance_means(gt_marker)?,
        })
    }
}

/// `TAU_GRID_POINTS` evenly spaced values over `[lo, hi)`. The upper end is
/// left out: with a strict comparison nothing exceeds it.
pub fn tau_grid(lo: f64, hi: f64) -> Vec<f64> {
    (0..TAU_GRID_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / TAU_GRID_POINTS as f64)
        .collect()
}

/// Mean `|f+_pred - f+_gt|` over cases with at least one instance.
pub fn mean_error_at(cases: &[&Ki67Case], tau: f64) -> f64 {
    let total: f64 = cases
        .iter()
        .map(|c| {
            let p = fraction_above(&c.pred_means, tau).expect("non-empty");
            let g = fraction_above(&c.gt_means, tau).expect("non-empty");
            (p - g).abs()
        })
        .sum();
    total / cases.len() as f64
}

/// Grid search over the range of ground-truth validation instance means; the
/// smallest minimizing threshold wins. The result is frozen.
///
/// The grid follows the true intensities so that every candidate leaves at
/// least one true positive; a threshold above all of them scores zero error
/// whatever the prediction.
pub fn select_tau(val_cases: &[Ki67Case]) -> Result<Ki67Threshold, MetricError> {
    let valid: Vec<&Ki67Case> = val_cases.iter().filter(|c| !c.gt_means.is_empty()).collect();
    if valid.is_empty() {
        return Err(MetricError::NoValidationCases);
    }
    let (lo, hi) = valid
        .iter()
        .flat_map(|c| c.gt_means.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut best = (f64::INFINITY, lo);
    for tau in tau_grid(lo, hi) {
        let e = mean_error_at(&valid, tau);
        if e < best.0 {
            best = (e, tau);
        }
    }
    Ok(Ki67Threshold {
        tau: best.1,
        selected_on: Split::Val,
        frozen: true,
        grid: Some((lo, hi)),
    })
}
