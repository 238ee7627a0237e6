//! `hybridna`: config-driven runs of the hybrid nucleotide model.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::tokenize::TokenizeArgs;
use error::Result;

#[derive(Debug, Parser)]
#[command(name = "hybridna", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Next-token pretraining on FASTA files or a synthetic genome.
    Pretrain(RunArgs),
    /// Echo-embedding classification or prompt-conditioned generative tuning.
    Finetune(RunArgs),
    /// Sample, beam-search or run the label-conditioned generation protocol.
    Generate(RunArgs),
    /// Throughput and memory sweep of the hybrid stack against its
    /// attention-only twin.
    Bench(RunArgs),
    /// Recompute classification metrics from a predictions file.
    Eval(RunArgs),
    /// Map sequences to token ids and back.
    Tokenize(TokenizeArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent of the run directory (default: $HYBRIDNA_RUN_ROOT, then ./runs).
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Dotted-path overrides, e.g. `--train.optimizer.lr 1e-3`.
    #[arg(
        value_name = "--KEY VALUE",
        trailing_var_arg = true,
        allow_hyphen_values = true
    )]
    overrides: Vec<String>,
}

impl RunArgs {
    fn load<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        config::load(self.config.as_deref(), &self.overrides)
    }

    fn root(&self) -> PathBuf {
        run::run_root(self.run_root.as_deref())
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => commands::pretrain::run(a.load()?, &a.root()),
        Command::Finetune(a) => commands::finetune::run(a.load()?, &a.root()),
        Command::Generate(a) => commands::generate::run(a.load()?, &a.root()),
        Command::Bench(a) => commands::bench::run(a.load()?, &a.root()),
        Command::Eval(a) => commands::eval::run(a.load()?, &a.root()),
        Command::Tokenize(a) => commands::tokenize::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
