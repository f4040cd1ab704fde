//! `scopeqa` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scopeqa::pooling::PoolingMode;

/// Seed used when neither `--seed` nor `SCOPEQA_SEED` is given.
pub const DEFAULT_SEED: u64 = 20_190_415;

#[derive(Parser, Debug)]
#[command(name = "scopeqa", version, about = "No-reference quality assessment for laparoscopic video")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// Random seed for every stochastic step.
    #[arg(long, global = true, env = "SCOPEQA_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Worker threads; 1 is the deterministic reference mode.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render procedural reference clips.
    Refs(RefsArgs),
    /// Distort every reference with all type and level combinations.
    Synth(SynthArgs),
    /// Train one stage of the pipeline.
    Train(TrainArgs),
    /// Score and classify one clip.
    Predict(PredictArgs),
    /// Evaluate a checkpoint on the test split of a manifest.
    Evaluate(EvaluateArgs),
    /// Write a checkpoint that echoes the manifest mos, for checking the
    /// evaluation path.
    Oracle(OracleArgs),
}

#[derive(Args, Debug)]
pub struct RefsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 25)]
    pub frames: usize,
    #[arg(long, value_enum, default_value_t = FrameFormatArg::Png)]
    pub frame_format: FrameFormatArg,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory holding one subdirectory of frames per reference clip.
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file overriding the severity tables.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Attach synthetic mos values to the manifest.
    #[arg(long)]
    pub pseudo_mos: bool,
    /// Share of clips assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Keep all clips of a reference on the same side of the split.
    #[arg(long)]
    pub content_split: bool,
    #[arg(long, value_enum, default_value_t = FrameFormatArg::Png)]
    pub frame_format: FrameFormatArg,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FrameFormatArg {
    Png,
    Ppm,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// 20-class distortion type and level classifier.
    Fdc,
    /// 5-class distortion type classifier, fine-tuned from fdc.
    Fdc5,
    /// Frame quality regressor, fine-tuned from fdc.
    Fqp,
    /// Video network with the frame model frozen.
    VqpTl,
    /// Video network trained end to end.
    VqpE2e,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Fdc => "fdc",
            Task::Fdc5 => "fdc5",
            Task::Fqp => "fqp",
            Task::VqpTl => "vqp-tl",
            Task::VqpE2e => "vqp-e2e",
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub task: Task,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the checkpoint and training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to start from (fdc for fdc5 and fqp, fqp for vqp-*).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Frames per batch for frame models, clips per batch for vqp-*.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Frames sampled per clip.
    #[arg(long, default_value_t = 25)]
    pub nf: usize,
    /// Attach synthetic mos values when the manifest has none.
    #[arg(long)]
    pub pseudo_mos: bool,
    /// Residual blocks per stage (fdc only).
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    /// Channels of the first stage; later stages double it (fdc only).
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    /// Input crop size (fdc only).
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
    /// Disable random crop and flip.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Fcnn,
    Arith,
    Geo,
    Harm,
    Median,
}

impl PoolingArg {
    pub fn conventional(self) -> Option<PoolingMode> {
        match self {
            PoolingArg::Fcnn => None,
            PoolingArg::Arith => Some(PoolingMode::Arithmetic),
            PoolingArg::Geo => Some(PoolingMode::Geometric),
            PoolingArg::Harm => Some(PoolingMode::Harmonic),
            PoolingArg::Median => Some(PoolingMode::Median),
        }
    }
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Clip directory.
    pub clip: PathBuf,
    /// Checkpoints to run; give a classifier and a quality model to get
    /// both the class and the scores.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = 25)]
    pub nf: usize,
    /// Temporal pooling; defaults to fcnn for video networks and arith
    /// for frame models.
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 25)]
    pub nf: usize,
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
    /// Attach synthetic mos values when the manifest has none.
    #[arg(long)]
    pub pseudo_mos: bool,
    /// Report files to write.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Svg])]
    pub format: Vec<ReportFormat>,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("E_PRECOND: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("E_PRECOND: cannot start {} worker threads: {e}", cli.global.threads);
            return ExitCode::from(2);
        }
    };
    let result = pool.install(|| match cli.command {
        Command::Refs(a) => commands::refs(&cli.global, a),
        Command::Synth(a) => commands::synth(&cli.global, a),
        Command::Train(a) => commands::train(&cli.global, a),
        Command::Predict(a) => commands::predict(&cli.global, a),
        Command::Evaluate(a) => commands::evaluate(&cli.global, a),
        Command::Oracle(a) => commands::oracle(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::from(2)
        }
    }
}
