//! None / Binary / Soft / Soft+Var comparison per architecture.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::{evaluate, prepare_samples, save_evaluation, write_splits, train, Arch, ConfigError, ExperimentConfig, PriorMode, TrainError, TrainedModel};
use crate::data::{PairedSample, Split, SplitManifest};
use crate::losses::read_loss_log;
use crate::metrics::{FeatureBackend, MetricReport, METRIC_COLUMNS};
use crate::prior::SegmentationBackend;

/// Keys allowed to differ between a baseline and its prior-conditioned
/// variants.
pub const CONTROLLED_KEYS: [&str; 3] = ["in_channels", "prior_mode", "use_var_loss"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    None,
    Binary,
    Soft,
    SoftVar,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::None, Condition::Binary, Condition::Soft, Condition::SoftVar];

    pub fn label(self) -> &'static str {
        match self {
            Condition::None => "None",
            Condition::Binary => "Binary",
            Condition::Soft => "Soft",
            Condition::SoftVar => "Soft+Var",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Condition::None => "none",
            Condition::Binary => "binary",
            Condition::Soft => "soft",
            Condition::SoftVar => "soft_var",
        }
    }

    /// The condition a config belongs to; `None` for combinations outside
    /// the grid (binary prior with the variance term).
    pub fn of(cfg: &ExperimentConfig) -> Option<Condition> {
        match (cfg.prior_mode, cfg.use_var_loss) {
            (PriorMode::None, false) => Some(Condition::None),
            (PriorMode::Binary, false) => Some(Condition::Binary),
            (PriorMode::Soft, false) => Some(Condition::Soft),
            (PriorMode::Soft, true) => Some(Condition::SoftVar),
            _ => None,
        }
    }

    /// The condition's config derived from a baseline.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let (mode, var) = match self {
            Condition::None => (PriorMode::None, false),
            Condition::Binary => (PriorMode::Binary, false),
            Condition::Soft => (PriorMode::Soft, false),
            Condition::SoftVar => (PriorMode::Soft, true),
        };
        ExperimentConfig {
            use_var_loss: var,
            ..base.clone().with_prior(mode)
        }
    }
}

/// Fails unless `variant` differs from `baseline` only in the controlled keys.
pub fn check_controlled(baseline: &ExperimentConfig, variant: &ExperimentConfig) -> Result<(), ConfigError> {
    let extra: Vec<String> = baseline
        .diff_keys(variant)
        .into_iter()
        .filter(|k| !CONTROLLED_KEYS.contains(&k.as_str()))
        .collect();
    if extra.is_empty() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!(
            "baseline and variant differ in uncontrolled keys: {}",
            extra.join(", ")
        )))
    }
}

/// Samples and split for a grid run. Samples should carry cached priors.
pub struct AblationData<'a> {
    pub splits: &'a SplitManifest,
    pub train: &'a [PairedSample],
    pub val: &'a [PairedSample],
    pub test: &'a [PairedSample],
    pub channel_names: &'a [String],
    pub nuclear_channel: usize,
    pub ki67_channel: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub checkpoint: PathBuf,
    pub val_report: MetricReport,
    pub test_report: MetricReport,
    pub epochs_run: usize,
    /// Some step logged a variance term.
    pub var_logged: bool,
    /// Largest logged variance term.
    pub max_var: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub arch: Arch,
    pub condition: Condition,
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub result: Result<CellResult, String>,
}

fn run_cell(
    cfg: &ExperimentConfig,
    data: &AblationData,
    dir: &Path,
    prior_backend: &dyn SegmentationBackend,
    instance_backend: &dyn SegmentationBackend,
    features: &dyn FeatureBackend,
    device: &Device,
) -> Result<CellResult, TrainError> {
    let tr = prepare_samples(data.train, cfg, prior_backend)?;
    let va = prepare_samples(data.val, cfg, prior_backend)?;
    let out = train(cfg, data.splits, &tr, &va, data.channel_names, data.nuclear_channel, dir, device)?;
    write_splits(dir, data.splits)?;
    let model = TrainedModel::load(&out.checkpoint, device)?;
    let val = evaluate(&model, &va, Split::Val, None, instance_backend, features, data.ki67_channel)?;
    save_evaluation(dir, Split::Val, &va, &val)?;
    // Test data are prepared only after training has finished.
    let te = prepare_samples(data.test, cfg, prior_backend)?;
    let test = evaluate(&model, &te, Split::Test, val.tau.as_ref(), instance_backend, features, data.ki67_channel)?;
    save_evaluation(dir, Split::Test, &te, &test)?;
    let rows = read_loss_log(&out.step_log).map_err(|e| TrainError::Io(e.to_string()))?;
    let max_var = rows.iter().filter_map(|r| r.l_var).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    Ok(CellResult {
        checkpoint: out.checkpoint,
        val_report: val.report,
        test_report: test.report,
        epochs_run: out.epochs_run,
        var_logged: max_var.is_some(),
        max_var,
    })
}

/// Runs every condition for each baseline config (one per architecture),
/// with up to `parallel` cells at a time. A failing cell is recorded and
/// the grid continues. Rows come back in architecture-then-condition order.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_grid(
    baselines: &[ExperimentConfig],
    data: &AblationData,
    out_dir: &Path,
    parallel: usize,
    prior_backend: &dyn SegmentationBackend,
    instance_backend: &dyn SegmentationBackend,
    features: &dyn FeatureBackend,
    device: &Device,
) -> Result<Vec<AblationCell>, ConfigError> {
    let mut jobs = Vec::new();
    for base in baselines {
        let base = Condition::None.apply(base);
        for cond in Condition::ALL {
            let cfg = cond.apply(&base);
            check_controlled(&base, &cfg)?;
            cfg.validate()?;
            let dir = out_dir.join(base.arch.to_string()).join(cond.slug());
            jobs.push((base.arch, cond, cfg, dir));
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellResult, String>>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..parallel.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (arch, cond, cfg, dir) = &jobs[i];
                log::info!("ablation cell {arch} / {}", cond.label());
                let r = run_cell(cfg, data, dir, prior_backend, instance_backend, features, device).map_err(|e| e.to_string());
                if let Err(e) = &r {
                    log::error!("cell {arch} / {} failed: {e}", cond.label());
                }
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    Ok(jobs
        .into_iter()
        .zip(results)
        .map(|((arch, condition, config, dir), r)| AblationCell {
            arch,
            condition,
            config,
            dir,
            result: r.unwrap_or_else(|| Err("cell did not run".into())),
        })
        .collect())
}

fn fmt_metric(r: &MetricReport, col: &str) -> String {
    match r.aggregates.get(col) {
        Some(a) => format!("{:.4} ± {:.4}", a.mean, a.std),
        None => "n/a".into(),
    }
}

/// Markdown table, one row per cell in grid order.
pub fn ablation_markdown(cells: &[AblationCell]) -> String {
    let mut s = String::from("| Architecture | Condition | SSIM ↑ | LPIPS-like ↓ | Ki67 error ↓ | pMAE ↓ | Count Δ ↓ | L_var logged |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for c in cells {
        match &c.result {
            Ok(r) => {
                let t = &r.test_report;
                s.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
                    c.arch.label(),
                    c.condition.label(),
                    fmt_metric(t, "ssim"),
                    fmt_metric(t, "lpips_like"),
                    fmt_metric(t, "ki67_error"),
                    fmt_metric(t, "pmae"),
                    fmt_metric(t, "nuclei_count_delta"),
                    if r.var_logged { "yes" } else { "no" }
                ));
            }
            Err(e) => s.push_str(&format!(
                "| {} | {} | failed: {} | | | | | |\n",
                c.arch.label(),
                c.condition.label(),
                e.replace('|', "/")
            )),
        }
    }
    s
}

/// CSV with one row per cell: arch, condition, config hash, status, metric
/// means and stds, and whether the variance term was logged.
pub fn write_ablation_csv(path: &Path, cells: &[AblationCell]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io(e.to_string()))?;
    let mut header: Vec<String> = ["arch", "condition", "config_hash", "status"].iter().map(|s| s.to_string()).collect();
    for c in METRIC_COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    header.push("var_logged".into());
    w.write_record(&header).map_err(|e| TrainError::Io(e.to_string()))?;
    for c in cells {
        let mut row = vec![
            c.arch.to_string(),
            c.condition.label().to_string(),
            c.config.hash(),
        ];
        match &c.result {
            Ok(r) => {
                row.push("ok".into());
                for col in METRIC_COLUMNS {
                    match r.test_report.aggregates.get(col) {
                        Some(a) => {
                            row.push(format!("{:.6}", a.mean));
                            row.push(format!("{:.6}", a.std));
                        }
                        None => row.extend([String::new(), String::new()]),
                    }
                }
                row.push(r.var_logged.to_string());
            }
            Err(e) => {
                row.push(format!("failed: {e}"));
                row.extend(std::iter::repeat_n(String::new(), 2 * METRIC_COLUMNS.len() + 1));
            }
        }
        w.write_record(&row).map_err(|e| TrainError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| TrainError::Io(e.to_string()))
}
