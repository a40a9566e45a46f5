//! `bdt`: dataset generation, training, sweeps, evaluation and the
//! acceptance suite from the command line.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 acceptance
//! failure, 5 policy error, 6 environment error, 1 anything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bdt_core::envs::Quality;
use bdt_core::policies::Mode;

#[derive(Parser, Debug)]
#[command(name = "bdt", version, about = "Budgeted decision transformer experiments")]
struct Cli {
    /// Root directory under which run directories are created.
    #[arg(long, global = true, env = "BDT_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,

    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out a scripted controller and write a dataset.
    GenData(GenDataArgs),
    /// Train one policy.
    Train(TrainArgs),
    /// Train one policy per constraint and seed and summarize.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Per-feature acquisition frequency over time for a checkpoint.
    Heatmap(HeatmapArgs),
    /// Run the acceptance suite.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Environment id, e.g. gridnav, gridnav-keyed, chainrunner, chainrunner-min+noisy.
    #[arg(long)]
    env: String,
    #[arg(long, default_value = "expert")]
    quality: Quality,
    #[arg(long, default_value_t = 250)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; defaults to `<output-root>/data/<env>-<quality>-s<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// JSON or TOML training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small single-core settings used by the acceptance suite.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    mode: Option<Mode>,
    /// Cost ceiling C on the normalized scale.
    #[arg(long)]
    constraint: Option<f64>,
    /// Read --constraint in raw cost units instead.
    #[arg(long)]
    raw_constraint: bool,
    /// Window N of the averaged constraint.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    gamma_step: Option<f64>,
    #[arg(long)]
    gamma_max: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    target_rtg: Option<f64>,
    #[arg(long)]
    selection_slack: Option<f64>,
    /// Train the acquisition-capable mode with every feature always acquired.
    #[arg(long)]
    force_full_masks: bool,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Context length K in timesteps.
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Hidden width of the MLP policies.
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// Run directory; defaults to one derived from mode, env, constraint and seed.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Episodes of the held-out evaluation after training; 0 skips it.
    #[arg(long, default_value_t = 256)]
    final_eval_episodes: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
    constraints: Vec<f64>,
    /// Number of seeds; runs use seeds 0..N.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Episodes of the final evaluation of every run.
    #[arg(long, default_value_t = 256)]
    final_eval_episodes: usize,
    /// Execute runs concurrently.
    #[arg(long)]
    parallel_runs: bool,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct RolloutFlags {
    /// Policy checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset the policy was trained on; supplies reference scores and the default target return.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 256)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    target_rtg: Option<f64>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    rollout: RolloutFlags,
    /// Replace the learned acquisition by independent draws with this probability.
    #[arg(long, conflicts_with_all = ["full_acquisition", "no_info"])]
    random_acquisition: Option<f64>,
    /// Acquire every feature.
    #[arg(long, conflicts_with = "no_info")]
    full_acquisition: bool,
    /// Acquire only the free features.
    #[arg(long)]
    no_info: bool,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[command(flatten)]
    rollout: RolloutFlags,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Criteria to run, e.g. 1,2,8; all by default.
    #[arg(long, value_delimiter = ',')]
    criteria: Vec<u8>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
