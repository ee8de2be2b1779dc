//! Aggregate tables over finished runs and qualitative panels.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use vstain_core::data::{load_dataset, LoadOptions};
use vstain_core::io::{write_png, Depth};
use vstain_core::metrics::{MetricReport, METRIC_COLUMNS};
use vstain_core::prior::{generate_soft_prior, make_backend};
use vstain_core::training::{eval_dir, read_prediction, Arch, Condition, ExperimentConfig, CONFIG_ECHO_FILE, REPORT_FILE};
use vstain_core::{MifStack, Raster, Split};

use crate::failure::{data, usage, CliResult};

pub const REPORT_TABLE: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const PANELS_DIR: &str = "panels";
const TILE_GAP: usize = 2;
const MAX_DEPTH: usize = 3;

/// Run directories (holding a config echo) at or below each path.
pub fn discover_runs(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    fn walk(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        if dir.join(CONFIG_ECHO_FILE).is_file() {
            out.push(dir.to_path_buf());
            return Ok(());
        }
        if depth == 0 {
            return Ok(());
        }
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for d in subdirs {
            walk(&d, depth - 1, out)?;
        }
        Ok(())
    }
    let mut runs = Vec::new();
    for p in paths {
        if !p.is_dir() {
            return Err(usage(format!("{} is not a directory", p.display())));
        }
        walk(p, MAX_DEPTH, &mut runs)?;
    }
    Ok(runs)
}

pub struct RunRow {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub report: MetricReport,
}

impl RunRow {
    pub fn condition_label(&self) -> &'static str {
        Condition::of(&self.config).map_or("Binary+Var", Condition::label)
    }

    fn sort_key(&self) -> (usize, usize, PathBuf) {
        (
            Arch::ALL.iter().position(|a| *a == self.config.arch).unwrap_or(usize::MAX),
            Condition::of(&self.config).map_or(usize::MAX, |c| Condition::ALL.iter().position(|x| *x == c).unwrap_or(usize::MAX)),
            self.dir.clone(),
        )
    }
}

/// Loads every run's config and test report; runs lacking either are
/// returned separately with the reason.
pub fn collect(runs: &[PathBuf]) -> (Vec<RunRow>, Vec<(PathBuf, String)>) {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for dir in runs {
        let config = match ExperimentConfig::load(&dir.join(CONFIG_ECHO_FILE)) {
            Ok(c) => c,
            Err(e) => {
                missing.push((dir.clone(), e.to_string()));
                continue;
            }
        };
        let path = eval_dir(dir, Split::Test).join(REPORT_FILE);
        match MetricReport::read_json(&path) {
            Ok(report) => rows.push(RunRow {
                dir: dir.clone(),
                config,
                report,
            }),
            Err(e) => missing.push((dir.clone(), e.to_string())),
        }
    }
    rows.sort_by_key(RunRow::sort_key);
    (rows, missing)
}

fn cell(r: &MetricReport, col: &str) -> String {
    r.aggregates
        .get(col)
        .map_or("n/a".into(), |a| format!("{:.4} ± {:.4}", a.mean, a.std))
}

pub fn markdown(rows: &[RunRow], missing: &[(PathBuf, String)]) -> String {
    let mut s = String::from("| Architecture | Condition | SSIM ↑ | LPIPS-like ↓ | Ki67 error ↓ | pMAE ↓ | Count Δ ↓ | n | Run |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.config.arch.label(),
            r.condition_label(),
            cell(&r.report, "ssim"),
            cell(&r.report, "lpips_like"),
            cell(&r.report, "ki67_error"),
            cell(&r.report, "pmae"),
            cell(&r.report, "nuclei_count_delta"),
            r.report.records.len(),
            r.dir.display()
        ));
    }
    if !missing.is_empty() {
        s.push_str("\nRuns without a test report:\n\n");
        for (d, why) in missing {
            s.push_str(&format!("- {}: {}\n", d.display(), why));
        }
    }
    s
}

pub fn write_csv(path: &Path, rows: &[RunRow]) -> CliResult<()> {
    let err = |e: csv::Error| data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header: Vec<String> = ["arch", "condition", "run", "config_hash", "n"].iter().map(|s| s.to_string()).collect();
    for c in METRIC_COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![
            r.config.arch.to_string(),
            r.condition_label().to_string(),
            r.dir.display().to_string(),
            r.report.config_hash.clone(),
            r.report.records.len().to_string(),
        ];
        for c in METRIC_COLUMNS {
            match r.report.aggregates.get(c) {
                Some(a) => rec.extend([format!("{:.6}", a.mean), format!("{:.6}", a.std)]),
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

/// Tiles for one case: input, prior, each target channel, each predicted
/// channel.
pub fn panel_tiles(ihc: &Raster, prior: &Raster, target: &MifStack, pred: &MifStack) -> Vec<Raster> {
    let mut tiles = vec![ihc.clone(), prior.clone()];
    tiles.extend((0..target.channels()).map(|k| target.unit_channel(k)));
    tiles.extend((0..pred.channels()).map(|k| pred.unit_channel(k)));
    tiles
}

/// Lays rows of equally sized tiles on a white RGB canvas. Grayscale tiles
/// are replicated across the color channels.
pub fn compose_panel(rows: &[Vec<Raster>]) -> CliResult<Raster> {
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| usage("empty panel"))?;
    let (th, tw) = (first.height(), first.width());
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let h = rows.len() * th + (rows.len() - 1) * TILE_GAP;
    let w = cols * tw + cols.saturating_sub(1) * TILE_GAP;
    let mut canvas = Raster::filled(h, w, 3, 1.0);
    for (i, row) in rows.iter().enumerate() {
        for (j, tile) in row.iter().enumerate() {
            if tile.height() != th || tile.width() != tw {
                return Err(data(format!("tile {:?} differs from {th}x{tw}", tile.dims())));
            }
            let (r0, c0) = (i * (th + TILE_GAP), j * (tw + TILE_GAP));
            for r in 0..th {
                for c in 0..tw {
                    for ch in 0..3 {
                        let v = tile.get(r, c, if tile.channels() == 1 { 0 } else { ch });
                        canvas.set(r0 + r, c0 + c, ch, v);
                    }
                }
            }
        }
    }
    Ok(canvas)
}

fn run_label(dir: &Path) -> String {
    let parts: Vec<String> = dir
        .components()
        .filter_map(|c| match c {
            std::path::Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect();
    let n = parts.len();
    parts[n.saturating_sub(3)..].join("_")
}

/// Panel of up to `max_cases` test patches for one run.
fn run_panel(row: &RunRow, max_cases: usize) -> CliResult<Option<Raster>> {
    let cfg = &row.config;
    let root = PathBuf::from(&cfg.dataset);
    let mut picks: Vec<(String, String)> = row
        .report
        .records
        .iter()
        .map(|r| (r.case_id.clone(), r.patch_id.clone()))
        .collect();
    picks.sort();
    picks.truncate(max_cases);
    if picks.is_empty() {
        return Ok(None);
    }
    let cases: BTreeSet<String> = picks.iter().map(|p| p.0.clone()).collect();
    let loaded = load_dataset(
        &root,
        cfg.layout,
        &LoadOptions {
            target_size: Some(cfg.image_size),
            cases: Some(cases),
        },
    )?;
    let backend = make_backend(cfg.prior_backend, &root);
    let pred_dir = eval_dir(&row.dir, Split::Test);
    let mut rows = Vec::new();
    for (case_id, patch_id) in &picks {
        let Some(s) = loaded.samples.iter().find(|s| &s.case_id == case_id && &s.patch_id == patch_id) else {
            continue;
        };
        let prior = generate_soft_prior(&s.ihc, &s.key(), backend.as_ref())?;
        let pred = read_prediction(&pred_dir, case_id, patch_id, &loaded.channel_names, loaded.nuclear_channel)?;
        rows.push(panel_tiles(s.ihc.raster(), prior.raster(), &s.mif, &pred));
    }
    if rows.is_empty() {
        return Ok(None);
    }
    compose_panel(&rows).map(Some)
}

pub fn report_cmd(paths: &[PathBuf], out: &Path, panels: usize) -> CliResult<()> {
    if paths.is_empty() {
        return Err(usage("give at least one run directory"));
    }
    let runs = discover_runs(paths)?;
    if runs.is_empty() {
        return Err(usage("no run directories found"));
    }
    let (rows, missing) = collect(&runs);
    std::fs::create_dir_all(out)?;
    let md = markdown(&rows, &missing);
    std::fs::write(out.join(REPORT_TABLE), &md)?;
    write_csv(&out.join(REPORT_CSV), &rows)?;
    if panels > 0 {
        let dir = out.join(PANELS_DIR);
        std::fs::create_dir_all(&dir)?;
        for r in &rows {
            match run_panel(r, panels) {
                Ok(Some(p)) => write_png(&dir.join(format!("{}.png", run_label(&r.dir))), &p, Depth::Eight)?,
                Ok(None) => {}
                Err(e) => log::warn!("no panel for {}: {e}", r.dir.display()),
            }
        }
    }
    print!("{md}");
    if rows.is_empty() {
        return Err(data("none of the runs has a test report"));
    }
    Ok(())
}
