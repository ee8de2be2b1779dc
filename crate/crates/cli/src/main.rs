//! `vstain`: synthesize paired data, train, evaluate, run the prior/loss
//! ablation grid and build report tables and panels.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

mod commands;
mod failure;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vstain_core::training::Arch;
use vstain_core::Split;

use commands::ExperimentArgs;

#[derive(Debug, Parser)]
#[command(name = "vstain", version, about = "Virtual IHC to mIF translation with soft structural priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural paired dataset with ground-truth sidecars.
    Synth {
        /// TOML dataset spec; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model on the train split, selecting on validation.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Architecture preset when no config file is given.
        #[arg(long)]
        arch: Option<Arch>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score a trained run on the validation or test split.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        split: Split,
        /// Dataset root (defaults to the one in the run's config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where reports go (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate None / Binary / Soft / Soft+Var per architecture.
    Ablate {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_value = "pix2pix_unet,regression_unet")]
        archs: Vec<Arch>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Cells trained at once.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Aggregate finished runs into a table and qualitative panels.
    Report {
        /// Run directories, or directories containing them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Test patches shown per run panel (0 disables panels).
        #[arg(long, default_value_t = 4)]
        panels: usize,
    },
}

fn run(cli: Cli) -> failure::CliResult<()> {
    match cli.command {
        Command::Synth {
            config,
            sets,
            seed,
            out,
            force,
        } => commands::synth(config.as_deref(), &sets, seed, &out, force),
        Command::Train { exp, arch, out, force } => commands::train_cmd(&exp, arch, &out, force),
        Command::Eval { run, split, data, out } => commands::eval_cmd(&run, split, data.as_deref(), out.as_deref()),
        Command::Ablate {
            exp,
            archs,
            out,
            force,
            parallel,
        } => commands::ablate_cmd(&exp, &archs, &out, force, parallel),
        Command::Report { runs, out, panels } => report::report_cmd(&runs, &out, panels),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.kind.exit_code())
        }
    }
}
