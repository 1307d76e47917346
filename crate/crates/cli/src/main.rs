//! `stoneseg`: auto-crop, rasterize, split, synthesize, train, search,
//! evaluate and annotate video from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 diverged training.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Diverged(m) => m,
        }
    }
}

/// Library errors are all problems with the inputs.
macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_errors!(
    std::io::Error,
    serde_json::Error,
    stoneseg::imaging::ImagingError,
    stoneseg::annotations::AnnotationError,
    stoneseg::nnet::NnetError,
    stoneseg::synthdata::SynthError,
    stoneseg::videopipe::VideoError
);

impl From<stoneseg::training::TrainError> for CliError {
    fn from(e: stoneseg::training::TrainError) -> Self {
        match e {
            stoneseg::training::TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "stoneseg", version, about = "Kidney-stone segmentation pipeline for endoscopic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Auto-crop every frame in a directory to its field of view; writes boxes.json.
    Crop {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize an annotation document into 0/255 mask PNGs.
    Rasterize {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign whole videos of a dataset index to train/val/test splits.
    Split {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to split.json next to the input index.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long)]
        val_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic video dataset with exact masks.
    Synth {
        #[command(flatten)]
        common: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 5)]
        videos: usize,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long)]
        image_size: Option<usize>,
        /// Comma-separated: blur, debris, foreign_object, saline, or all.
        #[arg(long)]
        challenges: Option<String>,
        #[arg(long)]
        challenge_rate: Option<f64>,
    },
    /// Train a model on the train split, validating on the val split if present.
    Train {
        #[command(flatten)]
        common: ConfigArg,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "run.jsonl")]
        log: PathBuf,
        #[arg(long, default_value = "model.ssck")]
        out: PathBuf,
    },
    /// Grid search over learning rates and batch sizes.
    Grid {
        #[command(flatten)]
        common: ConfigArg,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lrs: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        batches: Option<Vec<usize>>,
        #[arg(long)]
        seeds_per_cell: Option<usize>,
        #[arg(long, default_value = "grid.jsonl")]
        log: PathBuf,
        /// Summary of every cell and the winner.
        #[arg(long, default_value = "grid.json")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split and print the metric report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Annotate a frame sequence and write side-by-side panels.
    AnnotateVideo {
        #[arg(long)]
        model: PathBuf,
        /// Directory of frame_%06d.png plus index.json.
        #[arg(long, conflicts_with = "pipe", required_unless_present = "pipe")]
        frames: Option<PathBuf>,
        /// Raw FRM0 stream; `-` reads standard input.
        #[arg(long)]
        pipe: Option<PathBuf>,
        /// Directory of mask_%06d.png aligned with the frames.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Resample to this frame rate before annotating.
        #[arg(long, conflicts_with = "gt")]
        fps: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write raw probabilities as prob_%06d.pmap.
        #[arg(long)]
        pmap: bool,
        #[arg(long, value_enum, default_value_t = ModeArg::Pipelined)]
        mode: ModeArg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Measure streaming throughput on synthetic frames.
    Bench {
        #[arg(long, required_unless_present = "identity")]
        model: Option<PathBuf>,
        /// Replace the network with a pass-through to time everything else.
        #[arg(long)]
        identity: bool,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 300)]
        frames: usize,
        #[arg(long, value_enum, default_value_t = BenchMode::Both)]
        mode: BenchMode,
    },
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON config with optional model/train/scene/grid/split sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    validation_interval: Option<usize>,
    #[arg(long)]
    warm_start: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Sequential,
    Pipelined,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchMode {
    Sequential,
    Pipelined,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
