use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;
mod io;
mod manifest;

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "kexp", version, about = "Kernel exponential family estimation by doubly dual embedding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate, export or split datasets.
    #[command(subcommand)]
    Data(DataCommand),
    /// Fit a model to a dataset.
    Train(TrainArgs),
    /// Draw samples from a fitted model.
    Sample(SampleArgs),
    /// Compute MMD between sample files or held-out NLL of a model.
    Eval(EvalArgs),
    /// Aggregate metric files into tables and plot data.
    Report(ReportArgs),
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    /// Draw a synthetic dataset.
    Gen(GenArgs),
    /// Re-emit a CSV, optionally normalized.
    Export(ExportArgs),
    /// Seeded 50/50 train/test split.
    Split(SplitArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
enum Generator {
    Ring,
    Grid,
    TwoMoons,
    LinearGaussian,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    name: Generator,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// Radial noise of the ring generator.
    #[arg(long, default_value_t = 0.1)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    /// Standardize every column and write the statistics alongside.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
enum TrainMethod {
    Dde,
    ScoreMatching,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "dde")]
    method: TrainMethod,
    #[arg(long)]
    data: PathBuf,
    /// JSON training configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Conditioning columns (0-based, comma separated) for a conditional model.
    #[arg(long, value_delimiter = ',')]
    x_cols: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    y_cols: Option<Vec<usize>>,
    /// Score-matching regularizer.
    #[arg(long, default_value_t = 0.01)]
    sm_eta: f64,
    #[arg(long, default_value_t = 1.0)]
    sm_lambda: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
enum SampleMethod {
    Direct,
    Hmc,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "direct")]
    method: SampleMethod,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV holding the conditioning columns, one draw per row (conditional
    /// models only; `--n` is ignored).
    #[arg(long)]
    cond: Option<PathBuf>,
    /// JSON HMC settings; missing fields take defaults.
    #[arg(long)]
    hmc_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
enum Metric {
    Mmd,
    Nll,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    metric: Metric,
    /// Sample CSV (MMD).
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Held-out CSV.
    #[arg(long)]
    test: PathBuf,
    /// Model JSON (NLL).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Reference draws per log-partition estimate.
    #[arg(long, default_value_t = 10_000)]
    n_mc: usize,
    /// Use trapezoid quadrature with this many points per axis instead of
    /// importance sampling.
    #[arg(long)]
    quadrature: Option<usize>,
    #[arg(long, default_value = "unnamed")]
    dataset: String,
    #[arg(long, default_value = "dde")]
    label: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append to an existing metrics file instead of overwriting it.
    #[arg(long)]
    append: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Metric CSVs produced by `eval`.
    #[arg(long, num_args = 1.., required = true)]
    metrics: Vec<PathBuf>,
    /// Plot panel `name=path[:xcol,ycol]`; columns default to the first two.
    #[arg(long)]
    panel: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("KEXP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::usage(format!("KEXP_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(CliError::usage("KEXP_THREADS must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::other(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Data(DataCommand::Gen(a)) => commands::data_gen(&a),
        Command::Data(DataCommand::Export(a)) => commands::data_export(&a),
        Command::Data(DataCommand::Split(a)) => commands::data_split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
