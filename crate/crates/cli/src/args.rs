use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sguq_core::pipeline::{parse_methods, Method};

#[derive(Debug, Parser)]
#[command(name = "sguq", version, about = "Spectral Gram uncertainty for sampled generations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Judge every answer against the reference and set record labels.
    Label(LabelArgs),
    /// Embed every answer through the encoder service.
    Embed(EmbedArgs),
    /// Compute the Gram eigenspectrum of every record.
    Featurize(FeaturizeArgs),
    /// Group each record's answers into meaning clusters.
    Cluster(ClusterArgs),
    /// Score baseline uncertainty methods.
    Baselines(BaselinesArgs),
    /// Fit the Gaussian-process classifier on labeled spectra.
    Train(TrainArgs),
    /// Predict correctness probabilities for spectra.
    Predict(PredictArgs),
    /// Compute AUROC, AUARC and ECE per method.
    Evaluate(EvaluateArgs),
    /// Write a deterministic synthetic dataset.
    Synth(SynthArgs),
    /// Print a saved evaluation as text.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Thresholded cosine similarity of answer embeddings.
    Cosine,
    /// Bidirectional entailment through the NLI service.
    Nli,
}

/// Restricts a stage to one side of the seeded train/test split.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SplitArgs {
    /// Train fraction of the seeded split; omit to use every record.
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LabelArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Where to write labeled records (default: overwrite --records).
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value = "judge")]
    pub judge_model: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Output embedding cache.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value = "encoder")]
    pub encoder_model: String,
    #[arg(long, default_value_t = 64)]
    pub max_batch: usize,
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Output spectra file.
    #[arg(long)]
    pub spectra: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct JudgeArgs {
    #[arg(long, value_enum, default_value_t = Similarity::Cosine)]
    pub similarity: Similarity,
    #[arg(long, default_value_t = sguq_core::baselines::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Output clustering file.
    #[arg(long)]
    pub clusters: PathBuf,
    #[command(flatten)]
    pub judge: JudgeArgs,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
}

/// A comma-separated `--methods` value.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodList(pub Vec<Method>);

impl Serialize for MethodList {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|m| m.name()))
    }
}

fn method_list(s: &str) -> Result<MethodList, String> {
    parse_methods(s).map(MethodList).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BaselinesArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Output baseline-scores file.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_parser = method_list, default_value = "pe,se,dse,kle-heat,kle-matern,cov-eig,cos-eig,umpire")]
    pub methods: MethodList,
    #[arg(long, default_value_t = sguq_core::spectral::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = sguq_core::baselines::DEFAULT_HEAT_T)]
    pub kle_t: f64,
    #[command(flatten)]
    pub judge: JudgeArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub spectra: PathBuf,
    /// Output model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated signal standard deviations for the kernel grid.
    #[arg(long, value_delimiter = ',')]
    pub grid_signal_std: Option<Vec<f64>>,
    /// Comma-separated lengthscales for the kernel grid.
    #[arg(long, value_delimiter = ',')]
    pub grid_lengthscale: Option<Vec<f64>>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub spectra: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output predictions file.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Needed with --train-frac to find the test side of the split.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub baselines: Option<PathBuf>,
    /// Output report table; full reports and ROC points go next to it.
    #[arg(long)]
    pub report: PathBuf,
    /// Defaults to every method the inputs provide.
    #[arg(long, value_parser = method_list)]
    pub methods: Option<MethodList>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Output records file.
    #[arg(long)]
    pub records: PathBuf,
    /// Output embedding cache.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.5)]
    pub positive_fraction: f64,
    #[arg(long, default_value_t = 0.08)]
    pub concentration: f64,
    #[arg(long, default_value_t = 4)]
    pub spread: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Report table written by `evaluate`.
    #[arg(long)]
    pub report: PathBuf,
}
