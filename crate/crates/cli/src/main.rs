use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use psol_core::pseudoboxes::Method;
use psol_core::tensor_io::Split;

mod commands;
mod config;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file, or missing input paths (exit 1).
    Config(String),
    /// Inputs that fail to parse or validate (exit 2).
    Data(String),
    /// Everything else (exit 3).
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<psol_core::Error> for CliError {
    fn from(e: psol_core::Error) -> Self {
        use psol_core::Error as E;
        match e {
            E::InvalidArgument(_) => CliError::Config(e.to_string()),
            E::NonFiniteLoss { .. } | E::Asymmetric(_) => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "psol", version, about = "Pseudo-box localization pipeline")]
struct Cli {
    /// Worker threads for per-class and batch parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub pooled_features: Option<PathBuf>,
    /// Pseudo annotations (default: <output_dir>/pseudo_boxes.jsonl).
    #[arg(long)]
    pub pseudo_boxes: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Regression-loss weight for train-joint.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset (manifest, feature maps, pooled features).
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        images_per_class: usize,
        #[arg(long, default_value_t = 64)]
        depth: usize,
        #[arg(long, default_value_t = 28)]
        grid: usize,
        #[arg(long, default_value_t = 10.0)]
        shift: f64,
    },
    /// Fit per-class directions on train features and write pseudo boxes.
    GenerateBoxes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features_dir: Option<PathBuf>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        classifier_weights: Option<PathBuf>,
        /// Split to box; directions are always fit on train.
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
    },
    /// Train the box regressor on pseudo boxes.
    TrainReg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the classification head on image labels.
    TrainCls {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train both heads with a summed loss.
    TrainJoint {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Predict boxes (and class scores, when a classifier is available).
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Extra classifier checkpoint whose scores are written alongside.
        #[arg(long)]
        classifier_checkpoint: Option<PathBuf>,
        #[arg(long)]
        pooled_features: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
    },
    /// Score predictions (and optional classifier scores) against the manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
    },
    /// Apply a trained regressor to another dataset without updating it.
    TransferEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pooled_features: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: psol_core::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "ddt" => Ok(Method::Ddt),
        "cam" => Ok(Method::Cam),
        other => Err(format!("unknown method {other:?} (expected ddt or cam)")),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::MakeFixture {
            out,
            seed,
            classes,
            images_per_class,
            depth,
            grid,
            shift,
        } => commands::make_fixture(&out, seed, classes, images_per_class, depth, grid, shift),
        Command::GenerateBoxes {
            common,
            features_dir,
            method,
            classifier_weights,
            split,
        } => commands::generate_boxes(&common, features_dir, method, classifier_weights, split),
        Command::TrainReg { common, train } => commands::train(&common, &train, commands::Head::Regressor),
        Command::TrainCls { common, train } => commands::train(&common, &train, commands::Head::Classifier),
        Command::TrainJoint { common, train } => commands::train(&common, &train, commands::Head::Joint),
        Command::Predict {
            common,
            checkpoint,
            classifier_checkpoint,
            pooled_features,
            split,
        } => commands::predict(
            &common,
            &checkpoint,
            classifier_checkpoint.as_deref(),
            pooled_features,
            split,
        ),
        Command::Evaluate {
            common,
            predictions,
            scores,
            split,
        } => commands::evaluate(&common, &predictions, scores.as_deref(), split),
        Command::TransferEval {
            common,
            checkpoint,
            pooled_features,
            split,
        } => commands::transfer_eval(&common, &checkpoint, pooled_features, split),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("psol: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
