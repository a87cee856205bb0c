use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvgps::gps::Method;
use mvgps::simulation::Scenario;
use mvgps::BalanceScope;

#[derive(Parser, Debug)]
#[command(name = "mvgps", version, about = "Multivariate generalized propensity score weighting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate balancing weights for a dataset.
    Weights(WeightsArgs),
    /// Report weighted exposure-confounder correlations and ESS.
    Balance(BalanceArgs),
    /// Fit a dose-response surface and export it on a grid.
    Surface(SurfaceArgs),
    /// Export the (trimmed) convex hull of the exposures.
    Hull(HullArgs),
    /// Run a simulation study from a config file.
    Study(StudyArgs),
    /// Print a builtin scenario as JSON.
    Scenario(ScenarioArgs),
    /// Draw a dataset from a scenario.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long = "data")]
    pub data: PathBuf,
    /// JSON file naming the outcome, exposure and confounder columns.
    #[arg(long = "spec")]
    pub spec: PathBuf,
}

#[derive(Args, Debug)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// mvgps, gps-uni:<j>, entropy:<j> or unweighted (j is 1-based).
    #[arg(long = "method", default_value = "mvgps", value_parser = parse_method)]
    pub method: Method,
    /// Winsorize weights at the [1-q, q] quantiles.
    #[arg(long = "trim")]
    pub trim: Option<f64>,
    /// Factorization order as 1-based exposure positions, e.g. 2,1.
    #[arg(long = "order", value_delimiter = ',')]
    pub order: Option<Vec<usize>>,
    #[arg(long = "max-iter", default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long = "tol", default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long = "output")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct BalanceArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Weight CSV written by `weights`; repeat for several methods.
    #[arg(long = "weights")]
    pub weights: Vec<PathBuf>,
    /// Add an unweighted row.
    #[arg(long = "unweighted")]
    pub unweighted: bool,
    #[arg(long = "scope", value_enum, default_value = "confounders")]
    pub scope: ScopeArg,
    /// JSON report.
    #[arg(long = "output")]
    pub output: PathBuf,
    /// One row per exposure-covariate pair.
    #[arg(long = "pairs")]
    pub pairs: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScopeArg {
    Confounders,
    AllCovariates,
}

impl From<ScopeArg> for BalanceScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Confounders => BalanceScope::Confounders,
            ScopeArg::AllCovariates => BalanceScope::AllCovariates,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionKind {
    Hull,
    Box,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormulaKind {
    Linear,
    Interaction,
}

#[derive(Args, Debug)]
pub struct SurfaceArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Weight CSV; omit for unit weights.
    #[arg(long = "weights")]
    pub weights: Option<PathBuf>,
    #[arg(long = "region", value_enum, default_value = "hull")]
    pub region: RegionKind,
    #[arg(long = "q", default_value_t = 1.0)]
    pub q: f64,
    #[arg(long = "formula", value_enum, default_value = "linear")]
    pub formula: FormulaKind,
    /// Shorthand for --formula interaction.
    #[arg(long = "interaction")]
    pub interaction: bool,
    /// Highest power of each exposure.
    #[arg(long = "degree", default_value_t = 1)]
    pub degree: u32,
    #[arg(long = "grid", default_value_t = 500)]
    pub grid: usize,
    /// Surface CSV; coefficients go to <stem>.coefficients.json.
    #[arg(long = "output")]
    pub output: PathBuf,
    #[arg(long = "coefficients")]
    pub coefficients: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HullArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long = "q", default_value_t = 1.0)]
    pub q: f64,
    #[arg(long = "output")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct StudyArgs {
    #[arg(long = "config")]
    pub config: PathBuf,
    #[arg(long = "output-dir")]
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long = "jobs", default_value_t = 0)]
    pub jobs: usize,
    /// Overrides the master seed of the config.
    #[arg(long = "seed")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ScenarioArgs {
    #[arg(value_parser = parse_scenario)]
    pub name: Scenario,
    #[arg(long = "rho", default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long = "n", default_value_t = 200)]
    pub n: usize,
    #[arg(long = "output")]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long = "scenario", value_parser = parse_scenario, conflicts_with = "config")]
    pub scenario: Option<Scenario>,
    /// Scenario JSON as printed by `scenario`.
    #[arg(long = "config")]
    pub config: Option<PathBuf>,
    #[arg(long = "rho")]
    pub rho: Option<f64>,
    #[arg(long = "n")]
    pub n: Option<usize>,
    #[arg(long = "seed", default_value_t = 1)]
    pub seed: u64,
    /// Data CSV; the column spec goes to <stem>.spec.json.
    #[arg(long = "output")]
    pub output: PathBuf,
    /// Also write weights computed from the generating parameters.
    #[arg(long = "true-weights")]
    pub true_weights: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse::<Scenario>().map_err(|e| e.to_string())
}
