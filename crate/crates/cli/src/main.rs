//! `swiftseg` command-line interface.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Failure;
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "swiftseg", version, about = "Ladder-style semantic segmentation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set input=2048x1024 backbone=resnet18 train.epochs=5`.
    #[arg(long = "set", global = true, num_args = 1.., value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Directory for every artifact, including the effective config.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Build a model, print its per-stage summary and save initial weights.
    Build,
    /// Count learnable parameters.
    Params,
    /// Count multiply-accumulates per stage at the configured input size.
    Flops,
    /// Time batch-1 inference passes.
    Bench,
    /// Train on a dataset directory.
    Train,
    /// Per-class IoU and mIoU on the validation set.
    Eval,
    /// Predict a label map for one image.
    Infer,
    /// Estimate the effective receptive field.
    Erf,
    /// Fold batch norms into convolutions and save the result.
    FuseBn,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("SWIFTSEG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Validation(anyhow::anyhow!("SWIFTSEG_THREADS must be a positive integer, got `{raw}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set).map_err(Failure::Validation)?;
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| Failure::Runtime(anyhow::anyhow!("creating {}: {e}", cli.out.display())))?;
    commands::write(&cli.out.join("config.json"), &cfg.to_json())?;
    let ctx = commands::Ctx { cfg, out: cli.out };
    match cli.command {
        Command::Build => commands::build(&ctx),
        Command::Params => commands::params(&ctx),
        Command::Flops => commands::flops(&ctx),
        Command::Bench => commands::bench(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Infer => commands::infer(&ctx),
        Command::Erf => commands::erf(&ctx),
        Command::FuseBn => commands::fuse_bn(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, err) = match f {
                Failure::Validation(e) => (1, e),
                Failure::Runtime(e) => (2, e),
            };
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
