use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, ValueEnum};

mod commands;
mod config;
mod plot;

use commands::{Failure, Overrides};
use config::RunConfig;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// Run the NSFD scheme and write trajectory.csv / trajectory.svg
    Simulate,
    /// Peak-matching grid search for beta and kappa, writes fit.json
    Fit,
    /// Train one network, writes params.txt, loss_history.csv, prediction.svg
    Train,
    /// Dichotomic search over the loss weight, writes front.csv, level_*.svg, knee.json
    Beds,
    /// Score a parameter snapshot on the configured data, writes validation.json
    Validate,
    /// Write synthetic data to data.csv
    Synth,
}

/// SVIHR epidemic modelling with NSFD simulation and physics-informed networks.
#[derive(Debug, Parser)]
#[command(name = "svihr-pinn", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Override train.alpha
    #[arg(long)]
    alpha: Option<f64>,
    /// Override output_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override train.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Parameter snapshot for validate
    #[arg(long)]
    params: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<String, Failure> {
    let config = RunConfig::load(&cli.config)?;
    let ctx = commands::prepare(
        config,
        Overrides {
            alpha: cli.alpha,
            out: cli.out,
            seed: cli.seed,
            params: cli.params,
        },
    )?;
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Fit => commands::fit(&ctx),
        Command::Train => commands::train_cmd(&ctx),
        Command::Beds => commands::beds(&ctx),
        Command::Validate => commands::validate(&ctx),
        Command::Synth => commands::synth(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.exit_code())
        }
    }
}
