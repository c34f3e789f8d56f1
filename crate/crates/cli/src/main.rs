use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use rgito::config::Config;
use rgito::pipeline::{self, RunOptions, Subcommand};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Simulate,
    Measure,
    Fit,
    Backtest,
    McStudy,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Simulate => Subcommand::Simulate,
            Command::Measure => Subcommand::Measure,
            Command::Fit => Subcommand::Fit,
            Command::Backtest => Subcommand::Backtest,
            Command::McStudy => Subcommand::McStudy,
        }
    }
}

/// Realized GARCH-Ito volatility toolkit.
#[derive(Debug, Parser)]
#[command(name = "rgito", version)]
struct Cli {
    command: Command,
    /// Flat `section.key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Recompute and compare against the hashes in the existing manifest.
    #[arg(long)]
    check: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let sub: Subcommand = cli.command.into();
    let result = Config::load(&cli.config)
        .map(|mut cfg| {
            cfg.apply_env(std::env::vars());
            cfg
        })
        .map_err(|e| e.in_stage("config"))
        .and_then(|cfg| {
            pipeline::run(
                sub,
                &cfg,
                &RunOptions {
                    out: cli.out.clone(),
                    seed: cli.seed,
                    check: cli.check,
                },
            )
        });
    match result {
        Ok(summary) => {
            let verb = if summary.checked { "verified" } else { "wrote" };
            for (name, hash) in &summary.outputs {
                println!("{verb} {} {}", summary.out.join(name).display(), &hash[..16]);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("rgito {}: error: {e}", sub.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
