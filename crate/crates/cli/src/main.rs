use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use corrmcnn_cli::{
    cmd_eval, cmd_reconstruct, cmd_synth_check, cmd_train, exit_code, RunConfig, ToleranceFailure, DEFAULT_COUNT,
};

/// Two-view common representation learning with CorrMCNN.
#[derive(Parser)]
#[command(name = "crl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss log and config snapshot.
    Train(Common),
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out_dir>/model.ckpt`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Write original and cross-reconstructed images as PGM files.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_COUNT)]
        count: usize,
    },
    /// Check CCA recovery and learned correlation on planted synthetic data.
    SynthCheck(Common),
}

fn load(c: &Common) -> Result<RunConfig> {
    RunConfig::load(c.config.as_deref(), &c.sets)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c)?;
            let summary = cmd_train(&cfg)?;
            println!("checkpoint {}", summary.checkpoint.display());
            println!("loss log   {}", summary.log.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let report = cmd_eval(&cfg, checkpoint.as_deref())?;
            print!("{}", report.to_table());
        }
        Command::Reconstruct {
            common,
            checkpoint,
            count,
        } => {
            let cfg = load(&common)?;
            let files = cmd_reconstruct(&cfg, checkpoint.as_deref(), count)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::SynthCheck(c) => {
            let cfg = load(&c)?;
            let check = cmd_synth_check(&cfg)?;
            if !check.passed() {
                return Err(ToleranceFailure(check.table).into());
            }
            print!("{}", check.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
