//! `order-verify`: generate synthetic video, sample order tuples, pretrain, finetune and
//! evaluate.
//!
//! Exit codes: 0 on success, 1 when a domain or validation check fails (the message names
//! the field), 2 on a usage error. `ORDER_VERIFY_THREADS` caps the worker threads.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use order_verify::corpus::{CorpusError, Split};
use order_verify::model::ModelError;
use order_verify::pipeline::PipelineError;
use order_verify::sampler::SampleError;
use order_verify::tensor::OptimKind;

#[derive(Debug)]
pub enum CliError {
    Invalid { field: String, msg: String },
    Other(anyhow::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid { field, msg } => write!(f, "invalid `{field}`: {msg}"),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn invalid(field: impl Into<String>, msg: impl Into<String>) -> Self {
        CliError::Invalid {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config { field, msg } => CliError::invalid(field, msg),
            PipelineError::Model(ModelError::Config(msg)) => CliError::invalid("backbone", msg),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(msg) => CliError::invalid("backbone", msg),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::Config(msg) => CliError::invalid("sampler", msg),
            other => CliError::Other(other.into()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Config(msg) => CliError::invalid("corpus", msg),
            other => CliError::Other(other.into()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "order-verify", version, about = "Temporal order verification: data, training and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; sections: corpus, sampler, flow, backbone, train, eval, data.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts and the effective config.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Master seed (overrides `seed` in the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Heldout,
    Test,
    All,
}

impl SplitArg {
    pub fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Heldout => Some(Split::Heldout),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimArg {
    Sgd,
    Adagrad,
}

impl From<OptimArg> for OptimKind {
    fn from(o: OptimArg) -> Self {
        match o {
            OptimArg::Sgd => OptimKind::Sgd,
            OptimArg::Adagrad => OptimKind::AdaGrad,
        }
    }
}

/// Training flags shared by pretrain and finetune.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimArg>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus and its manifest.
    Gen {
        /// Clip kind, optionally weighted: `pendulum` or `pendulum=0.5`. Repeatable.
        #[arg(long = "kind")]
        kinds: Vec<String>,
        /// Number of clips.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Frame width and height in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Draw order tuples from a manifest split and write a shard plus stats.
    Sample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// three_order, two_close or two_order.
        #[arg(long, default_value = "three_order")]
        task: String,
        #[arg(long)]
        tau_max: Option<usize>,
        #[arg(long)]
        tau_min: Option<usize>,
        #[arg(long)]
        ssd_min: Option<f64>,
        #[arg(long)]
        neg_fraction: Option<f64>,
        #[arg(long)]
        draws_per_clip: Option<usize>,
        /// Frame gap for the two-frame tasks (defaults to tau_max).
        #[arg(long)]
        close_tau: Option<usize>,
    },
    /// Train a pretext task from scratch on a tuple shard.
    Pretrain {
        /// three_order, two_close, two_order, drlim or tempcoh.
        #[arg(long, default_value = "three_order")]
        task: String,
        /// Training shard; falls back to `data.shard` in the config file.
        #[arg(long)]
        shard: Option<PathBuf>,
        /// Shard for the logged heldout metric.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        neg_fraction: Option<f64>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train a classify or pose head on manifest clips, from a checkpoint or from scratch.
    Finetune {
        /// classify or pose.
        #[arg(long)]
        task: String,
        #[arg(long)]
        manifest: PathBuf,
        /// Pretrained checkpoint; omit for random initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Spaced frames taken from each training clip.
        #[arg(long)]
        frames_per_clip: Option<usize>,
        /// Use at most this many training clips per class.
        #[arg(long)]
        clips_per_class: Option<usize>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate a checkpoint: tuple accuracy on a shard, or its classify/pose head on clips.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        shard: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        frames_per_clip: Option<usize>,
    },
    /// Nearest neighbours of one query frame in embedding space.
    Nn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        query_clip: String,
        #[arg(long, default_value_t = 0)]
        query_frame: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Drop results whose pixel SSD to a better-ranked result is below this.
        #[arg(long, default_value_t = 0.0)]
        dedup_ssd: f64,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Fill-in-the-blank trials with the triplet head.
    Fill {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        candidates: Option<usize>,
        /// Frames from each endpoint to the true middle frame.
        #[arg(long)]
        gap: Option<usize>,
        /// Minimum distance of distractors from the span.
        #[arg(long)]
        min_sep: Option<usize>,
    },
    /// PCK curve of a pose checkpoint: CSV plus SVG.
    Pck {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `lo:hi:step` or a comma-separated list.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        frames_per_clip: Option<usize>,
    },
    /// Top responses of one unit of a conv or pool layer, with receptive-field boxes.
    Activations {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Layer name such as conv2 or pool3.
        #[arg(long)]
        layer: String,
        #[arg(long)]
        unit: usize,
        #[arg(long, default_value_t = 9)]
        k: usize,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// SVG line plot of a metrics CSV (loss and metric against iteration).
    Plot {
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.common.log_level)
        .format_timestamp(None)
        .init();
    if let Some(n) = order_verify::thread_cap() {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not cap threads at {n}: {e}");
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
