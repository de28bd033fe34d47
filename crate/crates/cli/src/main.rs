//! `lifnet`: train, evaluate, gradient-check and analyze spiking networks.
//!
//! Exit codes: 0 success, 1 invalid configuration, 2 runtime failure,
//! 3 gradient check above its error limit.

mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::commands::{Split, GRADCHECK_LIMIT};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "lifnet", version, about = "Spiking neural networks with adaptive thresholds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; writes checkpoint.bin, metrics.csv, config.toml and summary.json.
    Train(ConfigArgs),
    /// Evaluate a checkpoint with its stored inference thresholds.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split to evaluate.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Config and overrides applied on top of the checkpoint's embedded config.
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of the analytic gradients on a small network.
    Gradcheck(ConfigArgs),
    /// Sweep a Gaussian drive and report firing and gradient-available curves.
    Analyze(ConfigArgs),
}

fn print(v: &Value) {
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).expect("json"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => print(&commands::train(&config::load(a.config.as_deref(), &a.set)?)?),
        Command::Eval { checkpoint, split, cfg } => {
            let override_cfg = if cfg.config.is_some() || !cfg.set.is_empty() {
                let (_, stored) = commands::read_checkpoint(&checkpoint)?;
                Some(config::load_onto(Some(&stored), cfg.config.as_deref(), &cfg.set)?)
            } else {
                None
            };
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            print(&commands::eval(&checkpoint, override_cfg, split)?);
        }
        Command::Gradcheck(a) => {
            let out = commands::gradcheck(&config::load(a.config.as_deref(), &a.set)?)?;
            print(&out.summary);
            if out.worst.is_nan() || out.worst >= GRADCHECK_LIMIT {
                return Err(CliError::GradCheck {
                    worst: out.worst,
                    limit: GRADCHECK_LIMIT,
                });
            }
        }
        Command::Analyze(a) => print(&commands::analyze(&config::load(a.config.as_deref(), &a.set)?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let help = config::keys_help();
    let mut cmd = Cli::command().after_help(help.clone());
    for name in ["train", "eval", "gradcheck", "analyze"] {
        cmd = cmd.mut_subcommand(name, |s| s.after_help(help.clone()));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
