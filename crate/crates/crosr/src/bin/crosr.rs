use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crosr::cli::{cmd_eval, cmd_fit, cmd_sweep, cmd_train, load_run_config};

#[derive(Parser)]
#[command(
    name = "crosr",
    version,
    about = "Open-set recognition: train a classification-reconstruction net, \
             fit per-class profiles, evaluate and sweep rejection thresholds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration TOML
    #[arg(long)]
    config: PathBuf,
    /// Directory for output files, created if absent
    #[arg(long)]
    out: PathBuf,
    /// Override the config's top-level seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Model file written by an earlier step
    #[arg(long)]
    model: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the network on the known classes
    Train(CommonArgs),
    /// Fit per-class Weibull profiles onto a trained network
    Fit(ModelArgs),
    /// Score known and outlier test sets with the softmax baseline and the
    /// fitted model
    Eval(ModelArgs),
    /// Macro-F1 of the fitted model across the rejection threshold grid
    Sweep(ModelArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => {
            load_run_config(&a.config, a.seed).and_then(|c| cmd_train(&c, &a.out))
        }
        Command::Fit(a) => load_run_config(&a.common.config, a.common.seed)
            .and_then(|c| cmd_fit(&c, &a.model, &a.common.out)),
        Command::Eval(a) => load_run_config(&a.common.config, a.common.seed)
            .and_then(|c| cmd_eval(&c, &a.model, &a.common.out)),
        Command::Sweep(a) => load_run_config(&a.common.config, a.common.seed)
            .and_then(|c| cmd_sweep(&c, &a.model, &a.common.out)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
