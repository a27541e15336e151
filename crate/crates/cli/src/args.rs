use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "durcast", version, about = "Retrieval-augmented surgical duration prediction")]
pub struct Cli {
    /// Debug logging to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and split it into train/val/test CSVs.
    Generate(GenerateArgs),
    /// Fit the encoder, weights, index and priors on a training CSV.
    Build(BuildArgs),
    /// Predict one or more cases against built artifacts.
    Predict(PredictArgs),
    /// Fit on a training CSV and score a test CSV.
    Evaluate(EvaluateArgs),
    /// Sweep one setting and score each value.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub departments: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.7, 0.1, 0.2])]
    pub split: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    MockReferenceMean,
    MockEchoPrior,
    Http,
}

/// Settings shared by every command that runs the pipeline. Unset flags
/// fall back to the config file, then to built-in defaults.
#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// TOML file with pipeline settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// zero_shot, random_few_shot or rag.
    #[arg(long)]
    pub mode: Option<String>,
    /// References per prompt.
    #[arg(long)]
    pub k: Option<usize>,
    /// Candidates retrieved per reference kept.
    #[arg(long)]
    pub expansion: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub max_retries: Option<usize>,
    /// bayesian, mean, median, majority_vote or quantile_average.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub w_prior: Option<f64>,
    #[arg(long)]
    pub no_prior: bool,
    #[arg(long)]
    pub no_postprocess: bool,
    #[arg(long)]
    pub no_pca: bool,
    /// Fixed number of principal components for the weights.
    #[arg(long, conflicts_with = "coverage")]
    pub components: Option<usize>,
    /// Cumulative explained-variance ratio selecting the components.
    #[arg(long)]
    pub coverage: Option<f64>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Log-normal noise on mock answers.
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Fail when the backend is unreachable instead of dropping rounds.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Prompt template file.
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory written by `build`.
    #[arg(long)]
    pub artifacts: PathBuf,
    /// CSV with one case per row.
    #[arg(long, conflicts_with = "set")]
    pub case: Option<PathBuf>,
    /// Inline feature value, `name=value`; repeatable.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    pub set: Vec<String>,
    /// Emit JSON lines instead of text.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// Output directory for metrics, predictions, audit and timings.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// k, rounds, expansion, strategy, w_prior, pca_on_off, prior_on_off
    /// or postprocess_on_off.
    #[arg(long)]
    pub axis: String,
    /// Values to sweep; defaults depend on the axis.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}
