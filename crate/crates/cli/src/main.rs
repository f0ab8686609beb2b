//! Command-line driver: every experiment stage as a subcommand, each writing
//! its outputs (plus the fully resolved config) under
//! `<out_dir>/<command>/<run-id>/` so runs are reproducible from their own
//! artifacts.

mod commands;
mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "metanav", version, about = "Train, adapt, and evaluate navigation agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug)]
struct Common {
    /// Experiment config file (TOML). Omitted keys fall back to defaults;
    /// omitting the flag runs the default config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pins the run directory name (default: <config-fingerprint>-<unix-time>).
    #[arg(long)]
    run_id: Option<String>,
    /// Forces deterministic single-threaded execution. Every code path is
    /// single-threaded already, so this pins the reproducibility guarantee
    /// rather than switching modes.
    #[arg(long)]
    single_thread: bool,
}

#[derive(Args, Debug)]
struct WorldsArg {
    /// Directory holding world_<i>.json files (a gen-worlds run directory).
    #[arg(long)]
    worlds: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world suite used by every later stage.
    GenWorlds {
        #[command(flatten)]
        common: Common,
    },
    /// PPO-train the baseline agent under the nominal observation function.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        worlds: WorldsArg,
    },
    /// PPO-train with per-episode randomized observation functions.
    TrainDr {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        worlds: WorldsArg,
        /// Additionally condition the agent on a target close-up latent.
        #[arg(long)]
        target_embedding: bool,
    },
    /// Supervised latent matching over the task family's training range.
    AdaptSl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        worlds: WorldsArg,
        /// Baseline checkpoint stem (path without .ckpt/.json).
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Few-shot refinement of the supervised net on the held-out task.
    RefineSlFewshot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        worlds: WorldsArg,
        #[arg(long)]
        baseline: PathBuf,
        /// adapt-sl checkpoint stem.
        #[arg(long)]
        sl: PathBuf,
    },
    /// Meta-train the perception initialization over the task family.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        worlds: WorldsArg,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Few-shot adapt the meta-initialization to the held-out task.
    AdaptMeta {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        worlds: WorldsArg,
        #[arg(long)]
        baseline: PathBuf,
        /// meta-train checkpoint stem.
        #[arg(long)]
        meta_init: PathBuf,
    },
    /// Evaluate one checkpoint on a named split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        worlds: WorldsArg,
        /// Checkpoint stem to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Split: "nominal", "training-range", or "testing" (held-out task).
        #[arg(long, default_value = "nominal")]
        split: String,
        /// Also export latent-trace CSVs for the first N episodes.
        #[arg(long, default_value_t = 0)]
        traces: usize,
    },
    /// Paired comparison of several checkpoints on training-range + testing.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        worlds: WorldsArg,
        /// Method as name=checkpoint-stem; repeat per method.
        #[arg(long = "method", value_name = "NAME=STEM", required = true)]
        methods: Vec<String>,
    },
    /// Sweep one axis (shots or latent_dim) and record success rates.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        worlds: WorldsArg,
        /// Axis to sweep: "shots" or "latent_dim".
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 1,3,5,10.
        #[arg(long)]
        values: String,
        /// Baseline checkpoint stem (required for --axis shots).
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// meta-train checkpoint stem (required for --axis shots).
        #[arg(long)]
        meta_init: Option<PathBuf>,
    },
    /// Roll one greedy episode and dump per-step frames plus the latent trace.
    RenderRollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        worlds: WorldsArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// Split the episode is rendered under ("nominal" or "testing").
        #[arg(long, default_value = "nominal")]
        split: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = commands::dispatch(cli.command) {
        // One line, machine-parseable, nonzero exit.
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
