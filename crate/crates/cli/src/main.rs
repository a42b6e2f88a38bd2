mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use output::{CliError, CliResult};

/// Whitened fixed-X knockoffs, knockoff power bounds and their simulators.
///
/// Flags given on the command line override values in a `--config` file.
#[derive(Parser)]
#[command(name = "whiteout", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Target FDR level(s), comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    /// Master seed; overrides the seed in a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "WHITEOUT_THREADS")]
    pub threads: Option<usize>,
    /// JSON config: a scenario, or a Monte Carlo config for `simulate`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for JSON and CSV artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Bound constants C1, C2, C3 and the starred slope/intercept pairs.
    Constants,
    /// Rejection ceilings for a covariance and coefficient profile.
    Bounds(BoundsArgs),
    /// Monte Carlo power study from a config file.
    Simulate,
    /// T3-knockoff* power bound, or a knockoff* histogram for a fixed μ.
    T3(T3Args),
    /// Runs the whitening filter on an estimate and its covariance.
    Filter(FilterArgs),
    /// Inspects Δ and the leading eigenstructure of a covariance.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CovArgs {
    /// Covariance matrix as a headerless CSV file.
    #[arg(long)]
    pub sigma: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct BetaArgs {
    /// Coefficient vector, one value per line.
    #[arg(long)]
    pub beta: Option<PathBuf>,
    /// Common non-null coefficient size.
    #[arg(long)]
    pub beta0: Option<f64>,
    /// Number of non-nulls (with --beta0).
    #[arg(long)]
    pub d1: Option<usize>,
    /// Noise variance.
    #[arg(long)]
    pub sigma2: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub cov: CovArgs,
    #[command(flatten)]
    pub beta: BetaArgs,
    /// Non-null fraction for the random-support bound.
    #[arg(long)]
    pub pi1: Option<f64>,
    /// Use only the L leading eigenvectors for b_k.
    #[arg(long)]
    pub top_l: Option<usize>,
    /// Replicates of the η-walk simulation at the β_(1) stopping index (0 skips it).
    #[arg(long, default_value_t = 0)]
    pub walk_replicates: usize,
}

#[derive(Args, Debug, Clone)]
pub struct T3Args {
    #[command(flatten)]
    pub cov: CovArgs,
    #[command(flatten)]
    pub beta: BetaArgs,
    #[arg(long)]
    pub top_l: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub replicates: usize,
    /// Fixed μ profile (one value per line); simulates knockoff* directly.
    #[arg(long)]
    pub mu: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyArg {
    Oracle,
    Lasso,
}

#[derive(Args, Debug, Clone)]
pub struct FilterArgs {
    /// Estimate β̂, one value per line.
    #[arg(long)]
    pub beta_hat: PathBuf,
    /// Covariance of β̂ up to σ², as a headerless CSV matrix.
    #[arg(long)]
    pub sigma: PathBuf,
    /// Known noise variance.
    #[arg(long, conflicts_with_all = ["sigma_hat", "n"], required_unless_present = "sigma_hat")]
    pub sigma2: Option<f64>,
    /// Residual standard deviation σ̂; the whitening noise is carved from it.
    #[arg(long, requires = "n")]
    pub sigma_hat: Option<f64>,
    /// Number of observations behind σ̂.
    #[arg(long, requires = "sigma_hat")]
    pub n: Option<usize>,
    /// `equi` or `file:<path>` with one Δ_jj per line.
    #[arg(long, default_value = "equi")]
    pub delta: String,
    #[arg(long, value_enum, default_value_t = StrategyArg::Lasso)]
    pub strategy: StrategyArg,
    /// True β for the oracle strategy, one value per line.
    #[arg(long)]
    pub beta: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub cov: CovArgs,
    /// `equi` or `file:<path>` with one Δ_jj per line.
    #[arg(long, default_value = "equi")]
    pub delta: String,
}

fn run(cli: Cli) -> CliResult<output::Artifacts> {
    let g = &cli.global;
    if let Some(bad) = g.alpha.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(CliError::Usage(format!("--alpha {bad} must lie in (0, 1)")));
    }
    if let Some(t) = g.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Constants => commands::constants(g),
        Command::Bounds(a) => commands::bounds(g, a),
        Command::Simulate => commands::simulate(g),
        Command::T3(a) => commands::t3(g, a),
        Command::Filter(a) => commands::filter(g, a),
        Command::Diagnose(a) => commands::diagnose(g, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.global.out.clone();
    let result = run(cli).and_then(|art| {
        if let Some(dir) = &out {
            art.write(dir)?;
        }
        Ok(art)
    });
    match result {
        Ok(art) => {
            print!("{}", art.summary_text());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
