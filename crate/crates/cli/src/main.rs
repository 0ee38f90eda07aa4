//! `mfnet`: command-line driver for the meanfield library.
//!
//! Exit codes: 0 success, 1 computation failed, 2 usage or configuration
//! error.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "mfnet", version, about = "Mean-field analysis of block-structured interacting Markov processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    /// Model config file.
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory.
    #[arg(long, env = "MFNET_OUT_DIR", default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Dopri,
    Rk4,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct OdeArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Dopri)]
    pub method: MethodArg,
    /// Fixed step for rk4.
    #[arg(long, default_value_t = 0.01)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub abs_tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub rel_tol: f64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fixed point by the censoring iteration, with certificate.
    Solve(SolveArgs),
    /// Integrate the mean-field ODE.
    Integrate(IntegrateArgs),
    /// Simulate the N-particle system.
    Simulate(SimulateArgs),
    /// Basin scan and metastability summary.
    Scan(ScanArgs),
    /// Dump the RG-factorization of Γ at a measure.
    Factorize(FactorizeArgs),
    /// Certificates, mean drift, Lipschitz estimate, entropy decay.
    Check(CheckArgs),
    /// Level-0 ODE against the censored chain along a trajectory.
    CompareCensored(CompareArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: Common,
    /// Recipe (`uniform:4`, `geometric:0.5`, `poisson:1`, `custom:…`) or `file:PATH`.
    #[arg(long, default_value = "geometric:0.5")]
    pub init: String,
    #[arg(long, default_value_t = 1e-10)]
    pub eps: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1.0)]
    pub damping: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct IntegrateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "geometric:0.5")]
    pub init: String,
    #[arg(long = "T")]
    pub t_end: f64,
    /// Output spacing.
    #[arg(long, default_value_t = 0.1)]
    pub dt: f64,
    #[command(flatten)]
    pub ode: OdeArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "geometric:0.5")]
    pub init: String,
    #[arg(long = "N")]
    pub n: usize,
    #[arg(long = "T")]
    pub t_end: f64,
    /// Sampling spacing.
    #[arg(long, default_value_t = 0.5)]
    pub dt: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also run a propagation-of-chaos report over these particle counts.
    #[arg(long, value_delimiter = ',')]
    pub chaos_n: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub replications: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ScanArgs {
    #[command(flatten)]
    pub common: Common,
    /// `recipes:default20` or recipes separated by `;`.
    #[arg(long, default_value = "recipes:default20")]
    pub seeds: String,
    #[arg(long, default_value_t = 2000.0)]
    pub t_transient: f64,
    #[arg(long, default_value_t = 200.0)]
    pub t_window: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub merge_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = 3)]
    pub perturbations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// With a single stable limit, compare the two orders of the time and
    /// particle limits by simulation.
    #[arg(long)]
    pub commutation: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FactorizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Measure at which Γ is evaluated.
    #[arg(long, default_value = "geometric:0.5")]
    pub at: String,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "geometric:0.5")]
    pub at: String,
    /// Certificate of the measure given by `--at`.
    #[arg(long)]
    pub certify: bool,
    /// QBD mean-drift stability test at `--at`.
    #[arg(long)]
    pub mean_drift: bool,
    /// Lipschitz lower bound from this many sample pairs.
    #[arg(long)]
    pub lipschitz: Option<usize>,
    /// Entropy-decay report (linear models), from `--at` against `--entropy-q`.
    #[arg(long)]
    pub entropy: bool,
    /// Reference start for the entropy report; uniform over all states if omitted.
    #[arg(long)]
    pub entropy_q: Option<String>,
    #[arg(long = "T", default_value_t = 2.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    /// Relative entropy to the stationary vector as a Lyapunov candidate,
    /// sampled at this many points (linear models).
    #[arg(long)]
    pub lyapunov: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "geometric:0.5")]
    pub init: String,
    #[arg(long = "T")]
    pub t_end: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dt: f64,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Compute(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Compute(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(a) => commands::solve(&a),
        Command::Integrate(a) => commands::integrate(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Scan(a) => commands::scan(&a),
        Command::Factorize(a) => commands::factorize(&a),
        Command::Check(a) => commands::check(&a),
        Command::CompareCensored(a) => commands::compare_censored(&a),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("mfnet: {m}"),
                Failure::Compute(m) => eprintln!("mfnet: computation failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
