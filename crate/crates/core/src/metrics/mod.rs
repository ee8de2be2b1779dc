//! Image-quality and clinical-fidelity metrics and the report format.

pub mod instances;
pub mod ki67;
pub mod perceptual;
pub mod ssim;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::prior::{PatchKey, PriorError, SegmentationBackend};
use crate::raster::{MifStack, Raster};

pub use instances::{connected_components, detect_instances, nuclei_count_delta, InstanceLabelMap};
pub use ki67::{fraction_above, ki67_error, ki67_fraction, select_tau, Ki67Case, Ki67Threshold, TAU_GRID_POINTS};
pub use perceptual::{perceptual_distance, FeatureBackend, RandomConvPyramid};
pub use ssim::ssim;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid labels: {0}")]
    Labels(String),
    #[error("Ki67 fraction undefined: no nuclei instances")]
    UndefinedFraction,
    #[error("threshold is frozen at {0}")]
    FrozenThreshold(f64),
    #[error("test evaluation requires a frozen, validation-selected threshold")]
    UnfrozenThreshold,
    #[error("no validation case has nuclei instances")]
    NoValidationCases,
    #[error("feature backend `{backend}`: {reason}")]
    Backend { backend: String, reason: String },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("report: {0}")]
    Report(String),
}

/// `(1 / HW) sum |pred - target|` over single-channel `[0,1]` rasters.
pub fn pmae(pred: &Raster, target: &Raster) -> Result<f64, MetricError> {
    if !pred.same_shape(target) || pred.channels() != 1 {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", pred.dims(), target.dims())));
    }
    let n = pred.data().len();
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64)
}

/// Metric columns in table order.
pub const METRIC_COLUMNS: [&str; 5] = ["ssim", "lpips_like", "ki67_error", "pmae", "nuclei_count_delta"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub patch_id: String,
    pub ssim: f64,
    pub lpips_like: f64,
    /// `None` when the image has no nuclei or the layout lacks Ki67.
    pub ki67_error: Option<f64>,
    pub pmae: f64,
    pub nuclei_count_delta: usize,
    pub nuclei_count_rel: f64,
}

impl CaseRecord {
    pub fn value(&self, column: &str) -> Option<f64> {
        match column {
            "ssim" => Some(self.ssim),
            "lpips_like" => Some(self.lpips_like),
            "ki67_error" => self.ki67_error,
            "pmae" => Some(self.pmae),
            "nuclei_count_delta" => Some(self.nuclei_count_delta as f64),
            _ => None,
        }
    }
}

/// Everything computed for one predicted / ground-truth pair. The Ki67
/// error is filled in once the threshold is known.
pub struct PairEvaluation {
    pub record: CaseRecord,
    pub ki67: Option<Ki67Case>,
}

/// Computes SSIM, perceptual distance, pMAE and count delta on the nuclear
/// channel, and collects per-instance Ki67 means when `ki67_channel` is set.
pub fn evaluate_pair(
    pred: &MifStack,
    gt: &MifStack,
    key: &PatchKey,
    instance_backend: &dyn SegmentationBackend,
    features: &dyn FeatureBackend,
    ki67_channel: Option<usize>,
) -> Result<PairEvaluation, MetricError> {
    let nuc = gt.nuclear_channel();
    let pred_nuc = pred.unit_channel(nuc);
    let gt_nuc = gt.unit_channel(nuc);
    let (delta, rel) = nuclei_count_delta(&pred_nuc, &gt_nuc, key, instance_backend)?;
    let ki67 = match ki67_channel {
        Some(k) => {
            let instances = detect_instances(&gt_nuc, key, instance_backend)?;
            if instances.n() == 0 {
                None
            } else {
                Some(Ki67Case::new(&instances, &pred.unit_channel(k), &gt.unit_channel(k))?)
            }
        }
        None => None,
    };
    Ok(PairEvaluation {
        record: CaseRecord {
            case_id: key.case_id.clone(),
            patch_id: key.patch_id.clone(),
            ssim: ssim(pred, gt)?,
            lpips_like: perceptual_distance(pred, gt, features)?,
            ki67_error: None,
            pmae: pmae(&pred_nuc, &gt_nuc)?,
            nuclei_count_delta: delta,
            nuclei_count_rel: rel,
        },
        ki67,
    })
}

/// `|f+_pred - f+_gt|` from stored instance means.
pub fn ki67_case_error(case: &Ki67Case, tau: f64) -> Result<f64, MetricError> {
    Ok((fraction_above(&case.pred_means, tau)? - fraction_above(&case.gt_means, tau)?).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub config_hash: String,
    pub split: String,
    pub tau: Option<f64>,
    pub tau_grid: Option<(f64, f64)>,
    pub tau_grid_points: usize,
    pub feature_backend: String,
    pub instance_backend: String,
    /// Images whose Ki67 fraction was undefined (no nuclei).
    pub ki67_skipped: usize,
    pub records: Vec<CaseRecord>,
    pub aggregates: BTreeMap<String, Aggregate>,
}

fn aggregates_of(records: &[CaseRecord]) -> BTreeMap<String, Aggregate> {
    METRIC_COLUMNS
        .iter()
        .filter_map(|c| {
            let v: Vec<f64> = records.iter().filter_map(|r| r.value(c)).collect();
            Aggregate::of(&v).map(|a| (c.to_string(), a))
        })
        .collect()
}

impl MetricReport {
    pub fn new(
        config_hash: String,
        split: String,
        tau: Option<&Ki67Threshold>,
        feature_backend: &str,
        instance_backend: &str,
        ki67_skipped: usize,
        records: Vec<CaseRecord>,
    ) -> Self {
        let aggregates = aggregates_of(&records);
        Self {
            version: REPORT_VERSION,
            config_hash,
            split,
            tau: tau.map(|t| t.tau()),
            tau_grid: tau.and_then(|t| t.grid),
            tau_grid_points: TAU_GRID_POINTS,
            feature_backend: feature_backend.to_string(),
            instance_backend: instance_backend.to_string(),
            ki67_skipped,
            records,
            aggregates,
        }
    }

    pub fn mean(&self, column: &str) -> Option<f64> {
        self.aggregates.get(column).map(|a| a.mean)
    }

    /// Recomputes aggregates from the per-case records.
    pub fn check(&self) -> Result<(), MetricError> {
        let fresh = aggregates_of(&self.records);
        if fresh.keys().ne(self.aggregates.keys()) {
            return Err(MetricError::Report("aggregate columns do not match records".into()));
        }
        for (k, a) in &fresh {
            let b = &self.aggregates[k];
            if a.n != b.n || (a.mean - b.mean).abs() > 1e-9 || (a.std - b.std).abs() > 1e-9 {
                return Err(MetricError::Report(format!("aggregate `{k}` disagrees with per-case records")));
            }
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), MetricError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| MetricError::Report(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| MetricError::Report(format!("{}: {e}", path.display())))
    }

    pub fn read_json(path: &Path) -> Result<Self, MetricError> {
        let text = std::fs::read_to_string(path).map_err(|e| MetricError::Report(format!("{}: {e}", path.display())))?;
        let r: Self = serde_json::from_str(&text).map_err(|e| MetricError::Report(format!("{}: {e}", path.display())))?;
        r.check()?;
        Ok(r)
    }

    /// Single-row CSV: `<column>_mean,<column>_std` per metric plus the
    /// config hash.
    pub fn write_csv(&self, path: &Path) -> Result<(), MetricError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| MetricError::Report(e.to_string()))?;
        let mut header = vec!["config_hash".to_string(), "split".to_string(), "n".to_string()];
        let mut row = vec![self.config_hash.clone(), self.split.clone(), self.records.len().to_string()];
        for c in METRIC_COLUMNS {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
            match self.aggregates.get(c) {
                Some(a) => {
                    row.push(format!("{:.6}", a.mean));
                    row.push(format!("{:.6}", a.std));
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        w.write_record(&header).map_err(|e| MetricError::Report(e.to_string()))?;
        w.write_record(&row).map_err(|e| MetricError::Report(e.to_string()))?;
        w.flush().map_err(|e| MetricError::Report(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::IntensityBackend;
    use crate::raster::ValueRange;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(h, w, 1, |_, _, _| rng.random())
    }

    #[test]
    fn pmae_identities_and_oracle() {
        let a = random(9, 7, 1);
        assert_eq!(pmae(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.1);
        assert!((pmae(&shifted, &a).unwrap() - 0.1).abs() < 1e-12);
        for seed in 0..100 {
            let (p, t) = (random(10, 12, seed), random(10, 12, seed + 500));
            let mut s = 0.0;
            for r in 0..10 {
                for c in 0..12 {
                    s += (p.get(r, c, 0) - t.get(r, c, 0)).abs();
                }
            }
            assert!((pmae(&p, &t).unwrap() - s / 120.0).abs() < 1e-9);
        }
        assert!(pmae(&a, &random(9, 8, 1)).is_err());
    }

    fn record(i: usize, ki: Option<f64>) -> CaseRecord {
        CaseRecord {
            case_id: format!("c{i}"),
            patch_id: "p".into(),
            ssim: 0.5 + 0.01 * i as f64,
            lpips_like: 0.1 * i as f64,
            ki67_error: ki,
            pmae: 0.02,
            nuclei_count_delta: i,
            nuclei_count_rel: 0.0,
        }
    }

    #[test]
    fn report_aggregates_recompute_and_round_trip() {
        let records = vec![record(1, Some(0.1)), record(2, None), record(3, Some(0.3))];
        let rep = MetricReport::new("hash".into(), "test".into(), None, "f", "i", 1, records);
        assert_eq!(rep.aggregates["ki67_error"].n, 2);
        assert!((rep.mean("ki67_error").unwrap() - 0.2).abs() < 1e-12);
        assert!((rep.mean("nuclei_count_delta").unwrap() - 2.0).abs() < 1e-12);
        assert!((rep.aggregates["nuclei_count_delta"].std - 1.0).abs() < 1e-12);
        rep.check().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        rep.write_json(&p).unwrap();
        assert_eq!(MetricReport::read_json(&p).unwrap(), rep);
        rep.write_csv(&dir.path().join("r.csv")).unwrap();

        let mut tampered = rep.clone();
        tampered.aggregates.get_mut("ssim").unwrap().mean += 1e-6;
        tampered.write_json(&p).unwrap();
        assert!(MetricReport::read_json(&p).is_err());
    }

    #[test]
    fn identical_pair_is_perfect() {
        let names = vec!["DAPI".into(), "Lap2".into(), "Ki67".into()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = Raster::from_fn(32, 32, 3, |row, col, ch| {
            let d = ((row as f64 - 16.0).powi(2) + (col as f64 - 16.0).powi(2)).sqrt();
            if d < 5.0 && ch != 1 {
                0.9
            } else {
                0.05 + 0.01 * rng.random::<f64>()
            }
        });
        let gt = MifStack::new(r, ValueRange::Unit, names, 0).unwrap();
        let ev = evaluate_pair(&gt, &gt, &PatchKey::new("c", "p"), &IntensityBackend::default(), &RandomConvPyramid::default(), Some(2)).unwrap();
        assert!((ev.record.ssim - 1.0).abs() < 1e-12);
        assert_eq!(ev.record.lpips_like, 0.0);
        assert_eq!(ev.record.pmae, 0.0);
        assert_eq!(ev.record.nuclei_count_delta, 0);
        let case = ev.ki67.unwrap();
        assert_eq!(case.gt_means.len(), 1);
        assert_eq!(ki67_case_error(&case, 0.5).unwrap(), 0.0);
    }
}
