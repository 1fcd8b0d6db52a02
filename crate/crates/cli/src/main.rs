//! `scr`: spatial capture-recapture estimation for geotagged social-media users.

mod commands;
mod config;
mod error;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{covariate, fit, predict, rank, simulate, summary};

#[derive(Debug, Parser)]
#[command(
    name = "scr",
    version,
    about = "Spatial capture-recapture density estimation from geotagged posts"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SCR_THREADS")]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one model: fit.json, wald.csv, derived.csv.
    Fit(fit::FitArgs),
    /// Fit a model catalogue and rank it by AIC: ranking.csv.
    Rank(rank::RankArgs),
    /// Build covariate tables.
    #[command(subcommand)]
    Covariate(covariate::CovariateCommand),
    /// Simulate encounter data from known parameters.
    Simulate(simulate::SimulateArgs),
    /// Density surfaces, detection curves and home ranges from a fit.
    Predict(predict::PredictArgs),
    /// Summarize capture data or a fit.
    Summary(summary::SummaryArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(error::EXIT_INPUT as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("cannot set thread count: {e}");
        }
    }
    let result = match &cli.command {
        Command::Fit(a) => fit::run(a),
        Command::Rank(a) => rank::run(a),
        Command::Covariate(c) => covariate::run(c),
        Command::Simulate(a) => simulate::run(a),
        Command::Predict(a) => predict::run(a),
        Command::Summary(a) => summary::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error::exit_code(&e) as u8)
        }
    }
}
