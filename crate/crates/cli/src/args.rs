use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rdmkit::Criterion;

#[derive(Debug, Parser)]
#[command(name = "rdmkit", version, about = "Estimate, whiten and compare representational dissimilarity matrices")]
pub struct Cli {
    /// More log output on standard error (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate an RDM from a dataset manifest.
    Distances(DistancesArgs),
    /// Whiten an RDM with the zero-distance covariance of its estimates.
    Whiten(WhitenArgs),
    /// Compare a data RDM with a directory of model RDMs.
    Compare(CompareArgs),
    /// Run a model-selection simulation.
    Simulate(SimulateArgs),
    /// Run fast numerical self-checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Biased,
    Crossval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Mahalanobis,
}

#[derive(Debug, Args)]
pub struct DistancesArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long, value_enum, default_value_t = Method::Crossval)]
    pub method: Method,

    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    pub metric: MetricArg,

    /// Shrinkage of the channel covariance toward its diagonal, in [0, 1].
    /// Mahalanobis only; defaults to 0.3.
    #[arg(long, value_parser = parse_unit_interval)]
    pub shrink: Option<f64>,

    /// Regressors per partition when estimating the channel covariance from
    /// residuals. Mahalanobis only; defaults to the number of conditions.
    #[arg(long)]
    pub regressors: Option<usize>,

    /// Output file, or `-` for standard output.
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WhitenArgs {
    /// RDM JSON as written by `distances`.
    #[arg(long)]
    pub rdm: PathBuf,

    /// Condition noise covariance (headerless CSV, K×K). Identity if omitted.
    #[arg(long)]
    pub sigma_k: Option<PathBuf>,

    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// cosine, pearson, wuc, whitened_pearson, spearman, kendall_tau_a or cka.
    #[arg(long, value_parser = parse_criterion)]
    pub criterion: Criterion,

    /// Data RDM JSON.
    #[arg(long)]
    pub rdm: PathBuf,

    /// Directory holding one JSON file per model RDM.
    #[arg(long)]
    pub models: PathBuf,

    /// Condition noise covariance (headerless CSV, K×K) for the whitened criteria.
    #[arg(long)]
    pub sigma_k: Option<PathBuf>,

    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in scenario name or a scenario JSON file.
    #[arg(long)]
    pub scenario: String,

    /// Number of simulated experiments; overrides the scenario.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub sims: Option<u64>,

    /// Random seed; overrides the scenario.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Comma-separated criteria. All criteria if omitted.
    #[arg(long, value_delimiter = ',', value_parser = parse_criterion)]
    pub criteria: Vec<Criterion>,

    /// Worker threads. Defaults to the available parallelism.
    #[arg(long, env = "RDMKIT_THREADS", value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,

    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Perturb the zero-distance covariance before checking its spectrum.
    NullCovariance,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Monte Carlo draws for the sampling checks.
    #[arg(long, default_value_t = 20_000, value_parser = clap::value_parser!(u64).range(100..))]
    pub sims: u64,

    #[arg(long, default_value_t = 1)]
    pub seed: u64,

    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    s.parse::<Criterion>().map_err(|_| {
        let names: Vec<&str> = Criterion::ALL.iter().map(|c| c.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_unit_interval(s: &str) -> Result<f64, String> {
    let h: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&h) {
        Ok(h)
    } else {
        Err(format!("{h} is outside [0, 1]"))
    }
}

impl Cli {
    /// Flag combinations that clap's declarative rules cannot express.
    pub fn check_conflicts(&self) -> Result<(), String> {
        if let Command::Distances(a) = &self.command {
            if a.metric == MetricArg::Euclidean && (a.shrink.is_some() || a.regressors.is_some()) {
                return Err("--shrink and --regressors require --metric mahalanobis".into());
            }
        }
        Ok(())
    }
}
