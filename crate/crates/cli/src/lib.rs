//! Command-line driver: data generation, pretraining, evaluation, FLOP
//! profiling, ablations and expert activation dumps.

pub mod commands;
pub mod config;
pub mod data;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use mest_core::Error;

#[derive(Debug, Parser)]
#[command(name = "mest", version, about = "Sparse mixture-of-experts superpoint transformer experiments")]
pub struct Cli {
    /// Worker threads for per-scene and per-cell parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    /// Instance segmentation against the ground-truth instances.
    Seg,
    /// Referring segmentation of the prompted object.
    Miou,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationAxis {
    Experts,
    Layers,
    Zloss,
    Balance,
    TopkPolicy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes synthetic scenes and a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        objects: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        /// Width of the synthetic teacher features; 0 disables them.
        #[arg(long, default_value_t = 256)]
        teacher_dim: usize,
        /// Omit prompts.
        #[arg(long)]
        no_prompt: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Runs feature alignment then instance pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint; its configuration is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many updates have been made in total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Prints per-scene and mean IoU of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalTask::Miou)]
        task: EvalTask,
        /// Merge all masks of a scene before scoring (default: on for miou, off for seg).
        #[arg(long)]
        merge: Option<bool>,
        /// Score the ground truth against itself.
        #[arg(long)]
        gt_as_prediction: bool,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic per-token forward FLOPs versus the expert count.
    ProfileFlops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8")]
        experts: Vec<usize>,
        /// Superpoint tokens per scene.
        #[arg(long, default_value_t = 256)]
        tokens: usize,
    },
    /// Trains and evaluates one configuration per grid value; writes CSV.
    Ablate {
        #[arg(long, value_enum)]
        axis: AblationAxis,
        /// Comma-separated settings; layer placements join block indices with `-`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Writes the dominant expert of every superpoint in every MoE layer.
    DumpActivations {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// 0 success, 1 usage or configuration, 2 data, 3 numeric failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> mest_core::Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    pool.install(|| commands::dispatch(cli.command))
}
