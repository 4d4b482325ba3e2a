use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use objectness::attention::AttentionMode;
use objectness::datasetio::Split;
use objectness::evaluation::Task;
use objectness::network::Norm;
use objectness::{Error, ErrorKind};

mod commands;
mod manifest;

/// Synthetic layered scenes, motion-boundary and attended-surface networks.
#[derive(Parser, Debug)]
#[command(name = "objectness", version)]
struct Cli {
    /// Worker threads (0: one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset (manifest plus scene directories).
    Generate(GenerateArgs),
    /// Train MBSnet on a generated dataset.
    TrainMbs(TrainArgs),
    /// Train ASPnet on top of a frozen MBSnet.
    TrainAsp(TrainArgs),
    /// Evaluate one or more checkpoints on a split.
    Eval(EvalArgs),
    /// Predict label maps for a stored scene or a directory of frames.
    Predict(PredictArgs),
    /// Run MBSnet over external video frames in sliding windows.
    Ingest(IngestArgs),
    /// Render ground-truth overlays, GIFs and the inspection grid of a scene.
    Render(RenderArgs),
    /// Re-run ASPnet on one scene with attention moved across every layer.
    DemoMultiobject(DemoArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file; the built-in preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Desk-scale preset (500/50/50 scenes of 64x64).
    #[arg(long)]
    desk: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset root containing manifest.json.
    #[arg(long, env = "OBJECTNESS_DATA")]
    data: PathBuf,
    /// Desk-scale network (3 levels, 8 base channels).
    #[arg(long)]
    desk: bool,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Frozen MBSnet checkpoint (train-asp only).
    #[arg(long)]
    frozen_mbs: Option<PathBuf>,
    /// Pin training attention to one mode (train-asp only).
    #[arg(long, value_enum)]
    attention_mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "OBJECTNESS_DATA")]
    data: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Checkpoints to evaluate; two or more also write an ablation table.
    #[arg(long, required = true, num_args = 1..)]
    model: Vec<PathBuf>,
    #[arg(long)]
    frozen_mbs: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Regenerate attention in this mode instead of using the stored maps.
    #[arg(long, value_enum)]
    attention_mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// MBSnet or ASPnet checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    frozen_mbs: Option<PathBuf>,
    /// Stored scene directory.
    #[arg(long, conflicts_with = "frames", required_unless_present = "frames")]
    scene: Option<PathBuf>,
    /// Directory of image frames (MBSnet only).
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Attended layer for ASPnet.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, value_enum)]
    attention_mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of image frames, read in file-name order.
    #[arg(long)]
    frames: PathBuf,
    /// MBSnet checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Frames per window.
    #[arg(long, default_value_t = 15)]
    window: usize,
    /// Frames between consecutive window starts; by default windows are
    /// spaced so their predictions tile the video.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scene: PathBuf,
    /// ASPnet checkpoint; with --frozen-mbs adds the inspection grid.
    #[arg(long, requires = "frozen_mbs")]
    model: Option<PathBuf>,
    #[arg(long)]
    frozen_mbs: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, value_enum)]
    attention_mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scene: PathBuf,
    /// ASPnet checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    frozen_mbs: PathBuf,
    #[arg(long, value_enum)]
    attention_mode: Option<ModeArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Center,
    Constellation,
    Both,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Center => AttentionMode::Center,
            ModeArg::Constellation => AttentionMode::Constellation,
            ModeArg::Both => AttentionMode::Both,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    Instance,
    Batch,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Instance => Norm::Instance,
            NormArg::Batch => Norm::Batch,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Mbs,
    Asp,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Mbs => Task::Mbs,
            TaskArg::Asp => Task::Asp,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.jobs > 0 {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global();
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = format!("{:?}", e.kind()).to_lowercase();
            let msg = serde_json::json!({ "error": { "kind": kind, "message": e.to_string() } });
            eprintln!("{msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
