use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "kcef",
    version,
    about = "Kernel conditional exponential family density estimation"
)]
pub struct Cli {
    /// Maximum number of worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Timestamp recorded in provenance files; set by `replay`.
    #[arg(long, global = true, hide = true)]
    pub timestamp: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic grid dataset by rejection sampling.
    GenGrid(GenGridArgs),
    /// Fit a joint model with fixed or cross-validated hyperparameters.
    Fit(FitArgs),
    /// Held-out log-likelihood of a fitted model, or a learning curve.
    Eval(EvalArgs),
    /// Draw samples from a fitted model by ancestral HMC.
    Sample(SampleArgs),
    /// Per-node empirical score-matching objective on a dataset.
    Score(ScoreArgs),
    /// Fisher divergence demonstrations.
    Diverge(DivergeArgs),
    /// Re-run a command from its provenance file.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenGridArgs {
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub n: usize,
    /// Weight for both sine factors: one value, or one per dimension.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub weights: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub weights_a: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub weights_b: Option<Vec<f64>>,
    /// Support interval as `lo,hi`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [0.0, 1.0])]
    pub support: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CvArgs {
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub scale_grid: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `full`, `markov` or `custom:<json parent lists>` (0-based).
    #[arg(long, default_value = "markov")]
    pub dag: String,
    #[arg(
        long,
        allow_negative_numbers = true,
        conflicts_with = "cv",
        required_unless_present = "cv"
    )]
    pub lambda: Option<f64>,
    /// Multiplier on the median-heuristic bandwidths when `--lambda` is given.
    #[arg(long, default_value_t = 1.0, conflicts_with = "cv")]
    pub bandwidth_scale: f64,
    /// Select hyperparameters per node by grid-search cross-validation.
    #[arg(long)]
    pub cv: bool,
    #[command(flatten)]
    pub grid: CvArgs,
    /// Write the full cross-validation table here.
    #[arg(long, requires = "cv")]
    pub cv_table: Option<PathBuf>,
    /// Drop columns whose absolute correlation with an earlier column exceeds this.
    #[arg(long)]
    pub prune_corr: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub train_fraction: f64,
    /// Write the held-out rows of the split here.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub base_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "curve")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub is_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Summary JSON, or the curve CSV with `--curve`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "curve")]
    pub per_row: Option<PathBuf>,
    /// Refit on nested prefixes of `--train` and tabulate the log-likelihood.
    #[arg(long, requires = "train", conflicts_with = "model")]
    pub curve: bool,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [200, 500, 1000, 2000])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value = "markov")]
    pub dag: String,
    #[command(flatten)]
    pub grid: CvArgs,
    #[arg(long, default_value_t = 2.0)]
    pub base_std: f64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub step_size: f64,
    #[arg(long, default_value_t = 20)]
    pub leapfrog_steps: usize,
    #[arg(long, default_value_t = 100)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
    #[arg(long, default_value_t = 20)]
    pub chains: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Demo {
    AppendixD,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct DivergeArgs {
    #[arg(long, value_enum)]
    pub demo: Demo,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub provenance: PathBuf,
}
