//! `crossseg`: generate synthetic tasks, train, predict, evaluate and check
//! gradients from the command line.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// In-context segmentation toolkit.
#[derive(Parser, Debug)]
#[command(name = "crossseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic task archives.
    SynthGen(SynthGenArgs),
    /// Train a network on one or more task collections.
    Train(TrainArgs),
    /// Segment one query image given a support archive.
    Predict(PredictArgs),
    /// Score a checkpoint on held-out subjects and run analysis sweeps.
    Eval(EvalArgs),
    /// Compare tape gradients with finite differences on a tiny network.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-scale generator defaults: 1000 tasks at 128x128.
    Default,
    /// Ten 32x32 tasks for quick runs.
    Desk,
}

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// Number of tasks [default: 1000, or 10 with the desk preset].
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Subjects per task [default: 100].
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Image side length [default: 128, or 32 with the desk preset].
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub shapes: Option<usize>,
    /// Warp strength as a fraction of the image size.
    #[arg(long)]
    pub deform_alpha: Option<f64>,
    /// Warp smoothness as a fraction of the image size.
    #[arg(long)]
    pub deform_sigma: Option<f64>,
    /// First task index to generate.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    #[arg(long, env = "CROSSSEG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Seed of the 60/20/20 subject split [default: --seed].
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AugmentMode {
    /// In-task and task augmentation at the default probabilities.
    Full,
    InTask,
    None,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Task collection: an archive directory or a directory of archives.
    /// Repeat for several collections.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// JSON training config used as the base for the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub support: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Feature width of every layer.
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long, value_enum)]
    pub augment: Option<AugmentMode>,
    /// Comma-separated sampling weight per collection.
    #[arg(long, value_delimiter = ',')]
    pub task_weights: Option<Vec<f64>>,
    #[arg(long, env = "CROSSSEG_SEED")]
    pub seed: Option<u64>,
    /// Leave wall-clock times out of the log.
    #[arg(long)]
    pub no_wallclock: bool,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Query image tensor file, `[1, H, W]` or `[H, W]` in [0, 1].
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub support_archive: PathBuf,
    /// Split of the support archive to draw from; all subjects if absent.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(short = 'N', long = "support-size", default_value_t = 64)]
    pub n: usize,
    #[arg(short = 'K', long = "ensemble", default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, env = "CROSSSEG_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    SupportSize,
    EnsembleGrid,
    LimitedData,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Archive directory or directory of archives; repeatable.
    #[arg(long, required = true)]
    pub archive: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(short = 'N', long = "support-size", default_value_t = 64)]
    pub n: usize,
    #[arg(short = 'K', long = "ensemble", default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, env = "CROSSSEG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Analysis sweeps to run; repeatable.
    #[arg(long, value_enum)]
    pub sweep: Vec<Sweep>,
    /// Support sizes for the sweeps.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8])]
    pub ns: Vec<usize>,
    /// Ensemble sizes for the grid sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 8])]
    pub ks: Vec<usize>,
    /// Repetitions for the grid and limited-data sweeps.
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Predictions kept per query for the grid sweep.
    #[arg(long, default_value_t = 100)]
    pub grid_pool: usize,
    /// Pool sizes for the limited-data sweep; `full` is the whole split.
    #[arg(long, value_delimiter = ',', default_values_t = ["1".to_string(), "2".into(), "4".into(), "8".into(), "full".into()])]
    pub pools: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub support: usize,
    /// Feature width of the tiny network.
    #[arg(long, default_value_t = 4)]
    pub features: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, env = "CROSSSEG_SEED", default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthGen(a) => commands::synth_gen(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                crossseg::Error::Diverged { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
