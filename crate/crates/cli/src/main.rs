mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use curvemix::Error;

/// Probabilistic power-curve models for curtailed wind-farm data.
#[derive(Debug, Parser)]
#[command(name = "curvemix", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a labelled synthetic data set as CSV.
    Generate(GenerateArgs),
    /// Drop k-nearest-neighbour outliers from a CSV file.
    Filter(FilterArgs),
    /// Fit a model and write it as JSON.
    Fit(FitArgs),
    /// Sample per-component predictive curves on a wind-speed grid.
    Predict(PredictArgs),
    /// Assign observations to mixture components.
    Classify(ClassifyArgs),
    /// Score observations by posterior entropy and flag novel ones.
    Monitor(MonitorArgs),
    /// Compute NMSE and MSD on held-out data.
    Evaluate(EvaluateArgs),
    /// Compare the fitted bound across numbers of components.
    Crossval(CrossvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    ThreeTrend,
    FourTrend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Gp,
    Hetgp,
    Omgp,
    #[value(name = "omgp_het", alias = "omgp-het")]
    OmgpHet,
}

/// Column names of the input CSV.
#[derive(Debug, Clone, Args)]
pub struct SchemaArgs {
    #[arg(long, default_value = "turbine_id")]
    pub turbine_column: String,
    #[arg(long, default_value = "timestamp")]
    pub timestamp_column: String,
    #[arg(long, default_value = "wind_speed")]
    pub wind_speed_column: String,
    #[arg(long, default_value = "power")]
    pub power_column: String,
    #[arg(long, default_value = "label")]
    pub label_column: String,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "three-trend")]
    pub preset: Preset,
    #[arg(long, default_value_t = 9000, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "T01")]
    pub turbine_id: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// Neighbour rank used for the outlier distance.
    #[arg(long = "neighbours", default_value_t = curvemix::data::DEFAULT_KNN_K)]
    pub neighbours: usize,
    #[arg(long, default_value_t = curvemix::data::DEFAULT_KNN_QUANTILE)]
    pub quantile: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long, value_enum, default_value = "omgp")]
    pub kind: Kind,
    /// Number of mixture components (mixture kinds only).
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    /// Fraction of the data used for training; the rest can be written with
    /// `--test-out`.
    #[arg(long, default_value_t = 1.0)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optimizer starting points for each hyperparameter search.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub restarts: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iters: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_em: Option<u64>,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
    /// Where to write the held-out rows.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Grid bounds in m/s; default to the training range.
    #[arg(long, allow_hyphen_values = true)]
    pub min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub max: Option<f64>,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(2..))]
    pub points: u64,
    /// Leave observation noise out of the bands.
    #[arg(long)]
    pub latent: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// Entropy threshold in nats; defaults to 0.8·ln K.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// JSON-lines output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub k_min: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub k_max: u64,
    #[arg(long, default_value_t = 12, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeats: u64,
    /// Fit on a random subset of this fraction of the rows.
    #[arg(long, default_value_t = 1.0)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_em: Option<u64>,
    /// CSV of per-K bound statistics.
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure with its exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(Error::Io(std::io::Error::other(e)))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Io(std::io::Error::other(e)))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::InvalidConfig(_) | Error::InvalidQuantile(_)) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CURVEMIX_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
