//! Split evaluation: validation selects and freezes the Ki67 threshold, test
//! consumes it.

use std::path::{Path, PathBuf};

use super::{Prepared, TrainError, TrainedModel};
use crate::data::{Split, SplitManifest};
use crate::io::{read_png, write_png, Depth};
use crate::metrics::{evaluate_pair, ki67_case_error, select_tau, FeatureBackend, Ki67Case, Ki67Threshold, MetricError, MetricReport};
use crate::prior::{PatchKey, SegmentationBackend};
use crate::raster::{MifStack, Raster, ValueRange};

pub const PREDICTIONS_DIR: &str = "predictions";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const TAU_FILE: &str = "tau.json";
pub const SPLITS_FILE: &str = "splits.json";

/// `<run>/eval_<split>`
pub fn eval_dir(run_dir: &Path, split: Split) -> PathBuf {
    run_dir.join(format!("eval_{split}"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io(format!("{}: {e}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| TrainError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, TrainError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
}

pub fn write_splits(run_dir: &Path, splits: &SplitManifest) -> Result<(), TrainError> {
    write_json(&run_dir.join(SPLITS_FILE), splits)
}

pub fn read_splits(run_dir: &Path) -> Result<SplitManifest, TrainError> {
    read_json(&run_dir.join(SPLITS_FILE))
}

/// The frozen validation threshold of a run. A missing file means
/// validation has not been evaluated yet.
pub fn read_tau(run_dir: &Path) -> Result<Option<Ki67Threshold>, TrainError> {
    let path = run_dir.join(TAU_FILE);
    if !path.exists() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}

/// Writes report, CSV row and predictions under `eval_<split>/`; a
/// validation pass also stores its threshold in `tau.json`.
pub fn save_evaluation(run_dir: &Path, split: Split, samples: &[Prepared], outcome: &EvalOutcome) -> Result<PathBuf, TrainError> {
    let dir = eval_dir(run_dir, split);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    outcome.report.write_json(&dir.join(REPORT_FILE))?;
    outcome.report.write_csv(&dir.join(REPORT_CSV_FILE))?;
    write_predictions(&dir, samples, &outcome.predictions)?;
    if split == Split::Val {
        if let Some(t) = &outcome.tau {
            write_json(&run_dir.join(TAU_FILE), t)?;
        }
    }
    Ok(dir)
}

pub struct EvalOutcome {
    pub report: MetricReport,
    /// Threshold used; freshly selected when evaluating validation.
    pub tau: Option<Ki67Threshold>,
    pub predictions: Vec<MifStack>,
}

/// Scores `samples` (all from `split`) against their targets.
///
/// On the validation split the Ki67 threshold is selected from these samples
/// and returned frozen. On the test split `tau` must be such a frozen
/// threshold; anything else is rejected before any prediction is made.
pub fn evaluate(
    model: &TrainedModel,
    samples: &[Prepared],
    split: Split,
    tau: Option<&Ki67Threshold>,
    instance_backend: &dyn SegmentationBackend,
    features: &dyn FeatureBackend,
    ki67_channel: Option<usize>,
) -> Result<EvalOutcome, TrainError> {
    if split == Split::Test && ki67_channel.is_some() {
        match tau {
            Some(t) => {
                t.for_test()?;
            }
            None => return Err(MetricError::UnfrozenThreshold.into()),
        }
    }
    let inputs: Vec<_> = samples.iter().map(|p| &p.x).collect();
    let predictions = model.predict(&inputs)?;
    let mut records = Vec::with_capacity(samples.len());
    let mut cases: Vec<Option<Ki67Case>> = Vec::with_capacity(samples.len());
    for (p, pred) in samples.iter().zip(&predictions) {
        let key = PatchKey::new(&p.case_id, &p.patch_id);
        let ev = evaluate_pair(pred, &p.target, &key, instance_backend, features, ki67_channel)?;
        records.push(ev.record);
        cases.push(ev.ki67);
    }
    let tau = match (ki67_channel, split) {
        (None, _) => None,
        (Some(_), Split::Val) => {
            let valid: Vec<Ki67Case> = cases.iter().flatten().cloned().collect();
            Some(select_tau(&valid)?)
        }
        (Some(_), _) => tau.cloned(),
    };
    let mut skipped = 0;
    if let (Some(t), Some(_)) = (&tau, ki67_channel) {
        for (rec, case) in records.iter_mut().zip(&cases) {
            match case {
                Some(c) => rec.ki67_error = Some(ki67_case_error(c, t.tau())?),
                None => skipped += 1,
            }
        }
    }
    let report = MetricReport::new(
        model.meta.config_hash.clone(),
        split.to_string(),
        tau.as_ref(),
        features.name(),
        instance_backend.name(),
        skipped,
        records,
    );
    Ok(EvalOutcome {
        report,
        tau,
        predictions,
    })
}

/// `<dir>/predictions/<case>/<patch>_pred_<marker>.png`
pub fn prediction_path(dir: &Path, case_id: &str, patch_id: &str, marker: &str) -> PathBuf {
    dir.join(PREDICTIONS_DIR).join(case_id).join(format!("{patch_id}_pred_{marker}.png"))
}

/// Writes each predicted channel as a 16-bit PNG in `[0, 1]`.
pub fn write_predictions(dir: &Path, samples: &[Prepared], predictions: &[MifStack]) -> Result<(), TrainError> {
    for (p, pred) in samples.iter().zip(predictions) {
        for (k, name) in pred.channel_names().iter().enumerate() {
            let path = prediction_path(dir, &p.case_id, &p.patch_id, name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| TrainError::Io(format!("{}: {e}", parent.display())))?;
            }
            write_png(&path, &pred.unit_channel(k), Depth::Sixteen).map_err(|e| TrainError::Io(e.to_string()))?;
        }
    }
    Ok(())
}

/// Reads a prediction written by [`write_predictions`] back as a unit-range stack.
pub fn read_prediction(
    dir: &Path,
    case_id: &str,
    patch_id: &str,
    channel_names: &[String],
    nuclear_channel: usize,
) -> Result<MifStack, TrainError> {
    let mut channels = Vec::with_capacity(channel_names.len());
    for name in channel_names {
        let path = prediction_path(dir, case_id, patch_id, name);
        channels.push(read_png(&path).map_err(|e| TrainError::Io(e.to_string()))?);
    }
    let refs: Vec<&Raster> = channels.iter().collect();
    Ok(MifStack::new(Raster::stack(&refs)?, ValueRange::Unit, channel_names.to_vec(), nuclear_channel)?)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_cfg, tiny_setup};
    use super::super::{train, Arch};
    use super::*;
    use crate::metrics::RandomConvPyramid;
    use crate::prior::IntensityBackend;
    use candle_core::Device;

    #[test]
    fn validation_freezes_tau_and_test_requires_it() {
        let cfg = tiny_cfg(Arch::RegressionUnet);
        let (splits, tr, va, names) = tiny_setup(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &splits, &tr, &va, &names, 0, dir.path(), &Device::Cpu).unwrap();
        let model = TrainedModel::load(&out.checkpoint, &Device::Cpu).unwrap();
        let ib = IntensityBackend::default();
        let fb = RandomConvPyramid::default();

        let val = evaluate(&model, &va, Split::Val, None, &ib, &fb, Some(2)).unwrap();
        let tau = val.tau.clone().unwrap();
        assert!(tau.is_frozen());
        val.report.check().unwrap();
        assert_eq!(val.report.records.len(), va.len());
        assert_eq!(val.report.config_hash, cfg.hash());

        let provisional = Ki67Threshold::provisional(0.5);
        assert!(matches!(
            evaluate(&model, &va, Split::Test, Some(&provisional), &ib, &fb, Some(2)),
            Err(TrainError::Metric(MetricError::UnfrozenThreshold))
        ));
        assert!(evaluate(&model, &va, Split::Test, None, &ib, &fb, Some(2)).is_err());
        let test = evaluate(&model, &va, Split::Test, Some(&tau), &ib, &fb, Some(2)).unwrap();
        assert_eq!(test.report.tau, Some(tau.tau()));

        assert_eq!(read_tau(dir.path()).unwrap(), None);
        save_evaluation(dir.path(), Split::Val, &va, &val).unwrap();
        assert_eq!(read_tau(dir.path()).unwrap(), Some(tau.clone()));
        let ed = save_evaluation(dir.path(), Split::Test, &va, &test).unwrap();
        assert_eq!(MetricReport::read_json(&ed.join(REPORT_FILE)).unwrap(), test.report);
        let back = read_prediction(&ed, &va[0].case_id, &va[0].patch_id, &names, 0).unwrap();
        let want = test.predictions[0].to_unit();
        for (a, b) in back.raster().data().iter().zip(want.raster().data()) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
    }
}
