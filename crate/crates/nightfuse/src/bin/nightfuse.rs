//! Command-line front end: runs the full experiment or any single stage
//! against a JSON config, with flag overrides for output directory, seed,
//! inference precision, and deterministic reporting.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use nightfuse::config::{self, ExperimentConfig};
use nightfuse::network::PrecisionMode;
use nightfuse::{pipeline, Error, Result};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "nightfuse", version, about = "Cross-sensor nighttime-lights fusion experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Experiment config document (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Inference precision for the fuse stage.
    #[arg(long, global = true)]
    precision: Option<PrecisionMode>,
    /// Omit wall-clock fields so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Run every stage in order.
    Run,
    /// Generate or load the raw grid pair.
    Synth,
    /// Scale, background-filter, and write the model-ready grids.
    Prepare,
    /// Train the noise and velocity models.
    Train,
    /// Fuse the full condition grid with every configured sampler.
    Fuse,
    /// Score fused grids and the baseline; write metrics.csv.
    Eval,
    /// Write radial power spectra for truth, condition, and outputs.
    Psd,
    /// Time every (method, precision) combination; write bench.csv.
    Bench,
    /// Merge stage tables into one summary.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = config::validate_config(&text)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let precision = cli.precision.unwrap_or(PrecisionMode::Full32);
    match cli.cmd {
        Cmd::Run => pipeline::run_experiment(&cfg).map(|_| ()),
        Cmd::Synth => pipeline::stage_synth(&cfg),
        Cmd::Prepare => pipeline::stage_prepare(&cfg),
        Cmd::Train => pipeline::stage_train(&cfg),
        Cmd::Fuse => pipeline::stage_fuse(&cfg, precision),
        Cmd::Eval => pipeline::stage_eval(&cfg),
        Cmd::Psd => pipeline::stage_psd(&cfg),
        Cmd::Bench => pipeline::stage_bench(&cfg),
        Cmd::Report => pipeline::stage_report(&cfg),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
