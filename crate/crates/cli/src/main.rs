//! `fnproc train|eval|bands --config <path> [--seed N] [--out DIR]`

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fnproc::checkpoint::Checkpoint;
use fnproc::config::RunConfig;
use fnproc::inference::bands_csv;
use fnproc::run::{self, BANDS_FILE, CHECKPOINT_FILE, METRICS_FILE, PREDICTIONS_FILE, REPORT_FILE};
use fnproc::Error;

const DEFAULT_OUT: &str = "fnproc-out";

#[derive(Parser)]
#[command(name = "fnproc", version, about = "Functional Neural Processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model; writes the checkpoint and metrics.
    Train(Common),
    /// Evaluate a trained checkpoint; writes report.json.
    Eval(Common),
    /// Predictive bands over a grid for regression checkpoints.
    Bands(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (falls back to `out_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::NonFinite { .. }
            | Error::Cholesky { .. }
            | Error::ShapeMismatch { .. }
            | Error::NonScalarLoss(_) => 3,
            _ => 2,
        };
        Failure { code, error }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("fnproc: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train(args) => {
            let (cfg, seed, out) = setup(&args)?;
            let outcome = run::train(&cfg, seed)?;
            run::write_output(&out, CHECKPOINT_FILE, &outcome.checkpoint.to_json())?;
            run::write_output(&out, METRICS_FILE, &outcome.metrics_csv())?;
            eprintln!("wrote {}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval(args) => {
            let (cfg, seed, out) = setup(&args)?;
            let ckpt = load_checkpoint(&out)?;
            let eval = run::evaluate(&cfg, &ckpt, seed)?;
            let json = serde_json::to_string_pretty(&eval.report).expect("report serializes");
            run::write_output(&out, REPORT_FILE, &(json + "\n"))?;
            if let Some(csv) = eval.predictions {
                run::write_output(&out, PREDICTIONS_FILE, &csv)?;
            }
            eprintln!("wrote {}", out.join(REPORT_FILE).display());
        }
        Command::Bands(args) => {
            let (cfg, seed, out) = setup(&args)?;
            let ckpt = load_checkpoint(&out)?;
            let bands = run::bands(&cfg, &ckpt, seed)?;
            run::write_output(&out, BANDS_FILE, &bands_csv(&bands))?;
            eprintln!("wrote {}", out.join(BANDS_FILE).display());
        }
    }
    Ok(())
}

fn setup(args: &Common) -> Result<(RunConfig, u64, PathBuf), Error> {
    let cfg = RunConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    Ok((cfg, seed, out))
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint, Error> {
    Ok(Checkpoint::load(&dir.join(CHECKPOINT_FILE))?)
}
