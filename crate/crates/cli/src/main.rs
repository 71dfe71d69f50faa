//! `hones` benchmark harness.

mod run;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "hones", version, about = "Sequential simplex QP solver benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic flow with a fixed target and Gaussian rank-one updates.
    RunSynthetic(RunArgs),
    /// Online Newton Step portfolio flow.
    RunOns(RunArgs),
    /// Online Markowitz flow.
    RunMarkowitz(RunArgs),
    /// Property checks on seeded small instances; exit 0 iff all pass.
    Verify(verify::VerifyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SolverKind {
    Hones,
    PgWarm,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    #[arg(long, value_enum, default_value = "hones")]
    pub solver: SolverKind,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Regularization of the initial matrix `εI`.
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    /// Target scale of the synthetic flow.
    #[arg(long, default_value_t = 0.1)]
    pub c_factor: f64,
    /// Markowitz risk-return trade-off.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    /// Price CSV for the ONS and Markowitz flows; a seeded random walk
    /// is used when absent.
    #[arg(long)]
    pub prices: Option<PathBuf>,
    /// Refactorize the state every this many steps (0 disables).
    #[arg(long, default_value_t = 1000)]
    pub rebuild_every: usize,
    /// Stopping tolerance of the pg-warm baseline.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Iteration cap of the pg-warm baseline per step.
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    /// Turning points allowed per leg (default 10n).
    #[arg(long)]
    pub cycle_cap: Option<usize>,
    #[arg(long, value_enum, default_value = "on")]
    pub counters: Switch,
    /// Steps per epoch in the summary's cumulative timing.
    #[arg(long, default_value_t = 250)]
    pub epoch: usize,
    /// Also run the oracle on the same problems and write `twin.csv`.
    #[arg(long)]
    pub twin: bool,
    /// JSON array of scenario overrides run in parallel, one output
    /// directory per scenario.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::RunSynthetic(a) => run::cmd_run(hones::flows::FlowKind::Synthetic, &a),
        Command::RunOns(a) => run::cmd_run(hones::flows::FlowKind::Ons, &a),
        Command::RunMarkowitz(a) => run::cmd_run(hones::flows::FlowKind::Markowitz, &a),
        Command::Verify(a) => return verify::cmd_verify(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
