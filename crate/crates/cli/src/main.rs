//! Command-line front end: synthetic data, training, transfer, scoring and
//! the analysis experiments. Every command takes `--config FILE` and any
//! number of `--section.key value` overrides.

mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "aligntransfer", version, about = "Two-step non-autoregressive text style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// `--config FILE` and `--section.key value` pairs
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    args: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic lexicon-swap corpus with gold references
    Synth(Overrides),
    /// Train a generator and write metrics, reports and a checkpoint
    Train(Overrides),
    /// Transfer a file with a trained checkpoint
    Transfer(Overrides),
    /// Score transferred files
    Eval(Overrides),
    /// Count aligned word pairs in transfer results
    #[command(name = "align-analyze")]
    AlignAnalyze(Overrides),
    /// Compare gradient approximations under the cycle loss alone
    #[command(name = "cycle-exp")]
    CycleExp(Overrides),
}

fn run(cmd: Command) -> Result<(), CliError> {
    let (args, f): (_, fn(&config::RunConfig) -> error::Result<()>) = match cmd {
        Command::Synth(o) => (o.args, commands::synth),
        Command::Train(o) => (o.args, commands::train),
        Command::Transfer(o) => (o.args, commands::transfer),
        Command::Eval(o) => (o.args, commands::eval),
        Command::AlignAnalyze(o) => (o.args, commands::align_analyze),
        Command::CycleExp(o) => (o.args, commands::cycle_exp),
    };
    let cfg = config::parse_config(&args)?;
    f(&cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
