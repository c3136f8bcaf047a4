use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Debug, Parser)]
#[command(name = "nuance", version, about = "Personality regression from dyadic behaviour signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dyadic dataset
    Synth(SynthArgs),
    /// Compute spectral maps for every session, participant and modality
    Features(FeaturesArgs),
    /// Build subject-independent, balanced cross-validation folds
    Split(SplitArgs),
    /// Train a model on one fold, optionally with a hyperparameter sweep
    Train(TrainArgs),
    /// Score a trained run at trait level against ground truth
    Evaluate(EvaluateArgs),
    /// Tabulate MSE decreases of metric tables relative to the first one
    Report(ReportArgs),
    /// Aggregate questionnaire answers to facets or traits
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings (JSON); missing fields take defaults
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the spec file
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scoring key (JSON); defaults to the bundled BFI-2 key
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Worker threads (0 = all cores)
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads (0 = all cores)
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub key: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LevelArg {
    Trait,
    Facet,
    Nuance,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Talk,
    Ghost,
    Lego,
    Animals,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub level: LevelArg,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Fold plan written by `split`
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub fold: usize,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Maps written by `features`; computed on the fly when absent
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Training settings (JSON); flags win over the file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of sweep trials; without it a single run uses --lr and --batch-size.
    /// With it, an explicit --lr is tried first
    #[arg(long)]
    pub sweep: Option<usize>,
    /// Random proposals only, no surrogate
    #[arg(long)]
    pub no_surrogate: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Decoupled weight decay
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Concurrent sweep trials (0 = all cores)
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrderArg {
    ConvertFirst,
    CollapseFirst,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Mean,
    Median,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory written by `train`
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "convert-first")]
    pub order: OrderArg,
    #[arg(long, value_enum, default_value = "mean")]
    pub strategy: StrategyArg,
    /// Model metric table (JSON)
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the mean-baseline table here
    #[arg(long)]
    pub baseline_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metric tables; the first is the reference
    #[arg(long, num_args = 2.., required = true)]
    pub tables: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub key: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "trait")]
    pub level: LevelArg,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Features(a) => commands::features(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => commands::report(a),
        Command::Score(a) => commands::score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
