use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mildrop::parallel::Parallelism;

mod commands;
mod config;
mod convert;

use config::ExperimentArgs;
use convert::SourceFormat;

/// Attention-based multiple-instance learning experiments.
#[derive(Parser, Debug)]
#[command(name = "mildrop", version)]
struct Cli {
    /// Default root for output directories.
    #[arg(long, global = true, env = "MILDROP_OUT", default_value = "runs")]
    out_root: PathBuf,
    /// Folds (or grid cells) run concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model on a whole dataset and save a checkpoint.
    Train(ExperimentArgs),
    /// Repeated stratified k-fold cross-validation.
    Cv(ExperimentArgs),
    /// Cross-validate every (K, G) pair with MIL-Dropout.
    Ablate(AblateArgs),
    /// Gradient direction error, sharpness or loss-landscape reports.
    Diagnose(DiagnoseArgs),
    /// Write a synthetic bag dataset.
    Synth(SynthArgs),
    /// Convert a benchmark distribution to bag CSV.
    ConvertMusk(ConvertArgs),
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',', required = true)]
    ks: Vec<usize>,
    /// Comma-separated G values.
    #[arg(long, value_delimiter = ',', required = true)]
    gs: Vec<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    Gde,
    Sharpness,
    Landscape,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, value_enum)]
    which: Which,
    /// Checkpoint written by `train`; needed for sharpness and landscape
    /// unless --train-first is given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Train a model before measuring instead of loading a checkpoint.
    #[arg(long)]
    train_first: bool,
    /// Steps between whole-dataset gradient refreshes (gde).
    #[arg(long, default_value_t = 100)]
    refresh_every: usize,
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    #[arg(long, default_value_t = 100)]
    power_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Landscape points per axis (odd).
    #[arg(long, default_value_t = 21)]
    grid: usize,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Landscape directions, 1 or 2.
    #[arg(long, default_value_t = 2)]
    directions: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON generator settings; flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_bags: Option<usize>,
    #[arg(long)]
    min_instances: Option<usize>,
    #[arg(long)]
    max_instances: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    positive_fraction: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    witness_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV.
    #[arg(long, short)]
    output: PathBuf,
    /// Also write hidden instance labels as JSON.
    #[arg(long)]
    instance_labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    format: SourceFormat,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let mode = Parallelism::from_jobs(cli.jobs);
    let result = match &cli.command {
        Command::Train(a) => commands::train(a, &cli.out_root),
        Command::Cv(a) => commands::cv(a, &cli.out_root, mode),
        Command::Ablate(a) => commands::ablate(&a.experiment, &a.ks, &a.gs, &cli.out_root, mode),
        Command::Diagnose(a) => commands::diagnose(a, &cli.out_root, mode),
        Command::Synth(a) => commands::synth(a),
        Command::ConvertMusk(a) => commands::convert_musk(&a.input, &a.output, a.format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
