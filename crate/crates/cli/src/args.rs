use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tokcomp::data::{DataFormat, SplitSpec};
use tokcomp::models::Variant;
use tokcomp::par::Execution;
use tokcomp::train::{Suite, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "tokcomp",
    version,
    about = "Deletion-based sentence compression with token-wise sequence labellers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its checkpoint, report, and manifest.
    Train(TrainArgs),
    /// Print F1 and token accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Compress sentences read from stdin, one per line.
    Compress(CompressArgs),
    /// Run an experiment suite over several seeds.
    Suite(SuiteArgs),
}

/// `glove:PATH` or `tcf:PATH`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "path", rename_all = "snake_case")]
pub enum FeatureArg {
    Glove(PathBuf),
    Tcf(PathBuf),
}

impl FeatureArg {
    pub fn path(&self) -> &PathBuf {
        match self {
            FeatureArg::Glove(p) | FeatureArg::Tcf(p) => p,
        }
    }
}

impl FromStr for FeatureArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            Some(("glove", p)) if !p.is_empty() => Ok(FeatureArg::Glove(p.into())),
            Some(("tcf", p)) if !p.is_empty() => Ok(FeatureArg::Tcf(p.into())),
            _ => Err(format!("expected glove:PATH or tcf:PATH, got {s:?}")),
        }
    }
}

impl fmt::Display for FeatureArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureArg::Glove(p) => write!(f, "glove:{}", p.display()),
            FeatureArg::Tcf(p) => write!(f, "tcf:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    TsvLabeled,
    PairsJson,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::TsvLabeled => DataFormat::TsvLabeled,
            FormatArg::PairsJson => DataFormat::PairsJson,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Test,
    Validation,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: tokcomp::Error| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: tokcomp::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file; its leading records form the test and validation splits.
    #[arg(long, env = "TOKCOMP_DATA")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, env = "TOKCOMP_FORMAT", default_value = "pairs-json")]
    pub format: FormatArg,
    /// Additional files appended to the training split.
    #[arg(long, env = "TOKCOMP_EXTRA_TRAIN", value_delimiter = ',')]
    pub extra_train: Vec<PathBuf>,
    #[arg(long, env = "TOKCOMP_TEST_SIZE", default_value_t = 1000)]
    pub test_size: usize,
    #[arg(long, env = "TOKCOMP_VALIDATION_SIZE", default_value_t = 1000)]
    pub validation_size: usize,
}

impl DataArgs {
    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            test: self.test_size,
            validation: self.validation_size,
        }
    }
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// `glove:PATH` or `tcf:PATH`.
    #[arg(long, env = "TOKCOMP_FEATURES")]
    pub features: Option<FeatureArg>,
    /// Contextual layers concatenated per token (tcf only).
    #[arg(long, env = "TOKCOMP_LAYERS", default_value_t = 1)]
    pub layers: usize,
    #[arg(long, env = "TOKCOMP_GLOVE_DIM", default_value_t = 100)]
    pub glove_dim: usize,
}

#[derive(Debug, Args)]
pub struct TrainKnobs {
    #[arg(long, env = "TOKCOMP_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long, env = "TOKCOMP_BATCH_SIZE", default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, env = "TOKCOMP_MAX_EPOCHS", default_value_t = 200)]
    pub max_epochs: usize,
    #[arg(long, env = "TOKCOMP_LR", default_value_t = 1e-3)]
    pub lr: f32,
    /// Validation evaluations without improvement before stopping.
    #[arg(long, env = "TOKCOMP_PATIENCE", default_value_t = 10)]
    pub patience: usize,
    #[arg(long, env = "TOKCOMP_EVAL_EVERY", default_value_t = 1)]
    pub eval_every: usize,
    /// Wall-clock seconds at which validation metrics are recorded, e.g. "16,64,120,210".
    #[arg(long, env = "TOKCOMP_CHECKPOINTS", value_delimiter = ',')]
    pub checkpoints: Vec<f64>,
    #[arg(long, env = "TOKCOMP_MAX_SECONDS")]
    pub max_seconds: Option<f64>,
    /// Stop once validation F1 reaches this value.
    #[arg(long, env = "TOKCOMP_TARGET_F1")]
    pub target_f1: Option<f64>,
    /// Compute per-example gradients on one thread.
    #[arg(long, env = "TOKCOMP_SEQUENTIAL")]
    pub sequential: bool,
}

impl TrainKnobs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            lr: self.lr,
            patience: self.patience,
            eval_every: self.eval_every,
            seed: self.seed,
            timing_checkpoints: self.checkpoints.clone(),
            max_seconds: self.max_seconds,
            target_f1: self.target_f1,
            execution: execution(self.sequential),
            ..TrainConfig::default()
        }
    }
}

pub fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub features: FeatureArgs,
    /// unet, unet-noconv245, unet-nopool, or bilstm.
    #[arg(long, env = "TOKCOMP_MODEL", value_parser = parse_variant, default_value = "unet")]
    pub model: Variant,
    #[command(flatten)]
    pub knobs: TrainKnobs,
    /// Run directory for manifest.json, report.csv, and model.tckpt.
    #[arg(long, env = "TOKCOMP_OUT")]
    pub out: PathBuf,
    /// Repeat the run described by a manifest; other run flags are ignored.
    #[arg(long, env = "TOKCOMP_MANIFEST")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, env = "TOKCOMP_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[arg(long, value_enum, env = "TOKCOMP_SPLIT", default_value = "test")]
    pub split: SplitArg,
    #[arg(long, env = "TOKCOMP_SEQUENTIAL")]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long, env = "TOKCOMP_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub features: FeatureArgs,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    /// table1, table2, table3, table5, or fig2.
    #[arg(long, env = "TOKCOMP_SUITE", value_parser = parse_suite)]
    pub suite: Option<Suite>,
    #[command(flatten)]
    pub data: DataArgs,
    /// GloVe text vectors for the embedding cells.
    #[arg(long, env = "TOKCOMP_GLOVE")]
    pub glove: Option<PathBuf>,
    #[arg(long, env = "TOKCOMP_GLOVE_DIM", default_value_t = 100)]
    pub glove_dim: usize,
    /// Contextual feature file for the tcf cells.
    #[arg(long, env = "TOKCOMP_TCF")]
    pub tcf: Option<PathBuf>,
    #[arg(long, env = "TOKCOMP_SEEDS", value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Training-set sizes for fig2; defaults to the standard sweep.
    #[arg(long, env = "TOKCOMP_FIG2_SCHEDULE", value_delimiter = ',')]
    pub fig2_schedule: Vec<usize>,
    #[command(flatten)]
    pub knobs: TrainKnobs,
    #[arg(long, env = "TOKCOMP_OUT")]
    pub out: PathBuf,
    /// Repeat the suite described by a manifest; other suite flags are ignored.
    #[arg(long, env = "TOKCOMP_MANIFEST")]
    pub manifest: Option<PathBuf>,
}
