use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use minbal::{DispersionKind, Estimand, OutcomeModel, Overlap};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "minbal", version, about = "Minimal-dispersion balancing weights")]
pub struct Cli {
    /// Worker threads (falls back to MINBAL_JOBS, then the number of cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Omit timestamps so repeated runs produce identical bytes.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for balancing weights at a fixed tolerance.
    Weights(WeightsArgs),
    /// Select the tolerance by bootstrap balance and report the grid.
    Tune(TuneArgs),
    /// Weighted estimate with a confidence interval.
    Estimate(EstimateArgs),
    /// Write a simulated dataset as CSV.
    Simulate(SimulateArgs),
    /// Run a replication study.
    Bench(BenchArgs),
    /// Verify the closed-form dispersion transforms.
    Check(CheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DispersionArg {
    Variance,
    Entropy,
    Absdev,
}

impl From<DispersionArg> for DispersionKind {
    fn from(d: DispersionArg) -> Self {
        match d {
            DispersionArg::Variance => DispersionKind::Variance,
            DispersionArg::Entropy => DispersionKind::NegativeEntropy,
            DispersionArg::Absdev => DispersionKind::SmoothedAbsoluteDeviation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimandArg {
    Mean,
    Att,
    Ate,
}

impl From<EstimandArg> for Estimand {
    fn from(e: EstimandArg) -> Self {
        match e {
            EstimandArg::Mean => Estimand::Mean,
            EstimandArg::Att => Estimand::Att,
            EstimandArg::Ate => Estimand::Ate,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct InputArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Indicator column (1 = respondent or treated).
    #[arg(long)]
    pub z: String,
    /// Outcome column.
    #[arg(long)]
    pub y: Option<String>,
    /// Comma-separated covariate columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "entropy")]
    pub dispersion: DispersionArg,
    /// mean balances z = 1 towards the full sample; att balances z = 0
    /// towards z = 1; ate balances both groups towards the full sample.
    #[arg(long, value_enum, default_value = "mean")]
    pub estimand: EstimandArg,
    /// 1 balances covariates, 2 adds their squares.
    #[arg(long, default_value_t = 1)]
    pub moments: u8,
    /// Add pairwise products with --moments 2.
    #[arg(long)]
    pub cross_products: bool,
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long)]
    pub no_intercept: bool,
    /// Smoothing width of the absolute-deviation dispersion.
    #[arg(long, default_value_t = minbal::dispersion::DEFAULT_EPSILON)]
    pub epsilon: f64,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 50_000)]
    pub max_iters: usize,
    /// Exit with code 3 when the solver does not converge.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct GridArgs {
    #[arg(long, default_value_t = 21)]
    pub grid_points: usize,
    /// Upper end of the grid: `auto` (K^-1/2) or a number.
    #[arg(long, default_value = "auto")]
    pub grid_max: String,
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Permit grid values above K^-1/2.
    #[arg(long)]
    pub allow_large_delta: bool,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Balance tolerance in standard deviations.
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct TuneArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Fixed tolerance; ignored with --tune.
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    /// Select the tolerance by bootstrap balance first.
    #[arg(long)]
    pub tune: bool,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Report the Hajek form for the mean instead of Horvitz-Thompson.
    #[arg(long)]
    pub hajek: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpArg {
    KangSchafer,
    WongChan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapArg {
    Good,
    Bad,
}

impl From<OverlapArg> for Overlap {
    fn from(o: OverlapArg) -> Self {
        match o {
            OverlapArg::Good => Overlap::Good,
            OverlapArg::Bad => Overlap::Bad,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum OutcomeArg {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
}

impl From<OutcomeArg> for OutcomeModel {
    fn from(o: OutcomeArg) -> Self {
        match o {
            OutcomeArg::A => OutcomeModel::A,
            OutcomeArg::B => OutcomeModel::B,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub dgp: DgpArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "good")]
    pub overlap: OverlapArg,
    #[arg(long, value_enum, default_value = "A")]
    pub outcome_model: OutcomeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Add the true propensity as a `pi` column.
    #[arg(long)]
    pub with_propensity: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct BenchArgs {
    /// JSON bench specification.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the number of replications.
    #[arg(long)]
    pub replications: Option<usize>,
    /// Override the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Directory for sweep curves (CSV and SVG).
    #[arg(long)]
    pub curves_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct CheckArgs {
    /// Grid points per dispersion.
    #[arg(long, default_value_t = 101)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
