//! synth, train, eval and ablate.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::Device;
use log::info;
use vstain_core::data::synthetic::{write_synthetic_dataset, SynthDatasetSpec};
use vstain_core::data::{list_cases, load_dataset, make_splits, DatasetManifest, LoadOptions, LoadedDataset, PairedSample};
use vstain_core::metrics::RandomConvPyramid;
use vstain_core::prior::{generate_soft_prior, make_backend, IntensityBackend};
use vstain_core::training::{
    ablation_markdown, apply_override, canonical_hash, eval_dir, evaluate, prepare_samples, read_splits, read_tau, run_ablation_grid,
    save_evaluation, train, write_ablation_csv, write_splits, AblationData, Arch, ExperimentConfig, TrainedModel, CHECKPOINT_FILE,
};
use vstain_core::{Split, SplitManifest};

use crate::failure::{data, usage, CliResult, Failure, Kind};
use crate::manifest::RunManifest;

pub const ABLATION_TABLE: &str = "ablation.md";
pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Desk,
    Paper,
}

/// Experiment options shared by `train` and `ablate`.
#[derive(Debug, Clone, clap::Args)]
pub struct ExperimentArgs {
    /// TOML experiment config; without it the preset for the architecture is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults used when no config file is given.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// `key=value` config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Dataset root (overrides the config's `dataset`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ExperimentArgs {
    pub fn config_for(&self, arch: Option<Arch>) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let c = ExperimentConfig::load(p)?;
                match arch {
                    Some(a) if a != c.arch => c.with_overrides(&[format!("arch=\"{a}\"")])?,
                    _ => c,
                }
            }
            None => {
                let a = arch.unwrap_or(Arch::RegressionUnet);
                match self.preset {
                    Preset::Desk => ExperimentConfig::desk(a),
                    Preset::Paper => ExperimentConfig::paper(a),
                }
            }
        };
        cfg = cfg.with_overrides(&self.sets)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data {
            cfg.dataset = d.display().to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn is_empty_dir(dir: &Path) -> CliResult<bool> {
    Ok(std::fs::read_dir(dir)?.next().is_none())
}

/// Creates `out`. A non-empty directory is refused unless `force`, in which
/// case its contents are removed first.
pub fn prepare_out(out: &Path, force: bool) -> CliResult<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(usage(format!("{} exists and is not a directory", out.display())));
        }
        if !is_empty_dir(out)? {
            if !force {
                return Err(usage(format!("{} is not empty (pass --force to replace it)", out.display())));
            }
            let canon = out.canonicalize()?;
            if canon.parent().is_none() || std::env::current_dir().is_ok_and(|cwd| cwd.starts_with(&canon)) {
                return Err(usage(format!("refusing to clear {}", canon.display())));
            }
            std::fs::remove_dir_all(out)?;
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

pub fn synth(config: Option<&Path>, sets: &[String], seed: Option<u64>, out: &Path, force: bool) -> CliResult<()> {
    let mut table = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            let spec: SynthDatasetSpec = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            toml::Table::try_from(&spec).expect("spec serializes")
        }
        None => toml::Table::try_from(SynthDatasetSpec::default()).expect("spec serializes"),
    };
    for s in sets {
        apply_override(&mut table, s)?;
    }
    let mut spec: SynthDatasetSpec = table.try_into().map_err(|e| usage(format!("synthetic spec: {e}")))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    prepare_out(out, force)?;
    let manifest = RunManifest::new(
        "synth",
        canonical_hash(&spec),
        spec.seed,
        serde_json::to_value(&spec).expect("spec serializes"),
    );
    manifest.write(out)?;
    std::fs::write(out.join("synth_spec.toml"), toml::to_string(&spec).expect("spec serializes"))?;
    let written = write_synthetic_dataset(out, &spec)?;
    let n: usize = written.cases.iter().map(|c| c.patches.len()).sum();
    println!("wrote {n} paired samples in {} cases to {}", written.cases.len(), out.display());
    Ok(())
}

/// Split assignment recorded by the dataset, or a fresh case-level split.
fn resolve_splits(root: &Path, seed: u64) -> CliResult<SplitManifest> {
    if let Some(m) = DatasetManifest::read(root)? {
        if let Some(s) = m.splits(seed) {
            return Ok(s);
        }
    }
    let cases = list_cases(root)?;
    Ok(make_splits(&cases, seed, Default::default())?)
}

fn load_splits(root: &Path, cfg: &ExperimentConfig, splits: &SplitManifest, which: &[Split]) -> CliResult<LoadedDataset> {
    let cases: BTreeSet<String> = which.iter().flat_map(|s| splits.cases(*s)).collect();
    let opts = LoadOptions {
        target_size: Some(cfg.image_size),
        cases: Some(cases),
    };
    Ok(load_dataset(root, cfg.layout, &opts)?)
}

fn record_reads(manifest: &mut RunManifest, loaded: &LoadedDataset) {
    manifest.files_read = loaded.files_read.clone();
    manifest.skipped = loaded
        .skipped
        .iter()
        .map(|s| format!("{}/{}: {}", s.case_id, s.patch_id, s.reason))
        .collect();
}

fn partition(samples: &[PairedSample], splits: &SplitManifest, want: Split) -> Vec<PairedSample> {
    samples
        .iter()
        .filter(|s| splits.split_of(&s.case_id) == Some(want))
        .cloned()
        .collect()
}

pub fn train_cmd(args: &ExperimentArgs, arch: Option<Arch>, out: &Path, force: bool) -> CliResult<()> {
    let cfg = args.config_for(arch)?;
    let root = PathBuf::from(&cfg.dataset);
    if !root.is_dir() {
        return Err(data(format!("dataset root {} not found", root.display())));
    }
    prepare_out(out, force)?;
    let mut manifest = RunManifest::new("train", cfg.hash(), cfg.seed, serde_json::to_value(&cfg).expect("config serializes"));
    manifest.dataset = Some(cfg.dataset.clone());
    manifest.splits = vec![Split::Train.to_string(), Split::Val.to_string()];
    manifest.write(out)?;

    let splits = resolve_splits(&root, cfg.seed)?;
    let loaded = load_splits(&root, &cfg, &splits, &[Split::Train, Split::Val])?;
    record_reads(&mut manifest, &loaded);
    manifest.write(out)?;
    write_splits(out, &splits)?;

    let backend = make_backend(cfg.prior_backend, &root);
    let tr = prepare_samples(&partition(&loaded.samples, &splits, Split::Train), &cfg, backend.as_ref())?;
    let va = prepare_samples(&partition(&loaded.samples, &splits, Split::Val), &cfg, backend.as_ref())?;
    info!("training {} on {} train / {} val patches", cfg.arch, tr.len(), va.len());
    let outcome = train(&cfg, &splits, &tr, &va, &loaded.channel_names, loaded.nuclear_channel, out, &Device::Cpu)?;
    println!(
        "{} epochs{}; best validation loss {:.6} at epoch {}; checkpoint {}",
        outcome.epochs_run,
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.state.best_val_loss,
        outcome.state.best_epoch,
        outcome.checkpoint.display()
    );
    Ok(())
}

pub fn eval_cmd(run: &Path, split: Split, data_root: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    if split == Split::Train {
        return Err(usage("evaluate the val or test split"));
    }
    let out = out.unwrap_or(run);
    let ckpt = run.join(CHECKPOINT_FILE);
    if !ckpt.exists() {
        return Err(data(format!("no checkpoint at {}", ckpt.display())));
    }
    let model = TrainedModel::load(&ckpt, &Device::Cpu)?;
    let cfg = model.config.clone();
    let ki67_channel = cfg.layout.ki67_channel();
    let tau = match split {
        Split::Test if ki67_channel.is_some() => match read_tau(out)? {
            Some(t) => Some(t),
            None => return Err(usage(format!("no frozen threshold in {}; run `eval --split val` first", out.display()))),
        },
        _ => None,
    };
    let root = data_root.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.dataset));
    let dir = eval_dir(out, split);
    std::fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new("eval", cfg.hash(), cfg.seed, serde_json::to_value(&cfg).expect("config serializes"));
    manifest.dataset = Some(root.display().to_string());
    manifest.splits = vec![split.to_string()];
    manifest.write(&dir)?;

    let splits = read_splits(run)?;
    let loaded = load_splits(&root, &cfg, &splits, &[split])?;
    record_reads(&mut manifest, &loaded);
    manifest.write(&dir)?;
    if loaded.channel_names != model.meta.channel_names {
        return Err(data(format!(
            "dataset channels {:?} do not match the checkpoint's {:?}",
            loaded.channel_names, model.meta.channel_names
        )));
    }
    let backend = make_backend(cfg.prior_backend, &root);
    let prepared = prepare_samples(&loaded.samples, &cfg, backend.as_ref())?;
    let outcome = evaluate(
        &model,
        &prepared,
        split,
        tau.as_ref(),
        &IntensityBackend::default(),
        &RandomConvPyramid::default(),
        ki67_channel,
    )?;
    save_evaluation(out, split, &prepared, &outcome)?;
    let r = &outcome.report;
    let fmt = |c: &str| r.mean(c).map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{split}: n={} ssim={} lpips_like={} ki67_error={} pmae={} nuclei_count_delta={}{}",
        r.records.len(),
        fmt("ssim"),
        fmt("lpips_like"),
        fmt("ki67_error"),
        fmt("pmae"),
        fmt("nuclei_count_delta"),
        outcome.tau.as_ref().map_or(String::new(), |t| format!(" tau={:.4}", t.tau()))
    );
    Ok(())
}

pub fn ablate_cmd(args: &ExperimentArgs, archs: &[Arch], out: &Path, force: bool, parallel: usize) -> CliResult<()> {
    let mut archs = archs.to_vec();
    archs.sort_by_key(|a| Arch::ALL.iter().position(|x| x == a));
    archs.dedup();
    if archs.is_empty() {
        return Err(usage("no architectures given"));
    }
    let baselines = archs.iter().map(|a| args.config_for(Some(*a))).collect::<CliResult<Vec<_>>>()?;
    let first = &baselines[0];
    if baselines
        .iter()
        .any(|b| b.dataset != first.dataset || b.layout != first.layout || b.image_size != first.image_size || b.seed != first.seed)
    {
        return Err(usage("all architectures must share dataset, layout, image size and seed"));
    }
    let root = PathBuf::from(&first.dataset);
    if !root.is_dir() {
        return Err(data(format!("dataset root {} not found", root.display())));
    }
    prepare_out(out, force)?;
    let mut manifest = RunManifest::new(
        "ablate",
        canonical_hash(&baselines),
        first.seed,
        serde_json::to_value(&baselines).expect("config serializes"),
    );
    manifest.dataset = Some(first.dataset.clone());
    manifest.splits = [Split::Train, Split::Val, Split::Test].iter().map(|s| s.to_string()).collect();
    manifest.write(out)?;

    let splits = resolve_splits(&root, first.seed)?;
    let mut loaded = load_splits(&root, first, &splits, &[Split::Train, Split::Val, Split::Test])?;
    record_reads(&mut manifest, &loaded);
    manifest.write(out)?;
    write_splits(out, &splits)?;

    // Every condition sees the same prior; compute it once per patch.
    let backend = make_backend(first.prior_backend, &root);
    for s in &mut loaded.samples {
        s.prior = Some(generate_soft_prior(&s.ihc, &s.key(), backend.as_ref())?);
    }
    let (tr, va, te) = (
        partition(&loaded.samples, &splits, Split::Train),
        partition(&loaded.samples, &splits, Split::Val),
        partition(&loaded.samples, &splits, Split::Test),
    );
    let grid_data = AblationData {
        splits: &splits,
        train: &tr,
        val: &va,
        test: &te,
        channel_names: &loaded.channel_names,
        nuclear_channel: loaded.nuclear_channel,
        ki67_channel: first.layout.ki67_channel(),
    };
    let cells = run_ablation_grid(
        &baselines,
        &grid_data,
        out,
        parallel,
        backend.as_ref(),
        &IntensityBackend::default(),
        &RandomConvPyramid::default(),
        &Device::Cpu,
    )?;
    let md = ablation_markdown(&cells);
    std::fs::write(out.join(ABLATION_TABLE), &md)?;
    write_ablation_csv(&out.join(ABLATION_CSV), &cells)?;
    print!("{md}");
    let failed = cells.iter().filter(|c| c.result.is_err()).count();
    if failed > 0 {
        return Err(Failure {
            kind: Kind::Numerical,
            error: anyhow::anyhow!("{failed} of {} ablation cells failed", cells.len()),
        });
    }
    Ok(())
}
