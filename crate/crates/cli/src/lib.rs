//! Command-line front end: training, evaluation, rollouts, registry
//! maintenance and the analysis experiments.
//!
//! Every command is a plain function returning `Result<(), CliError>` so
//! the test suite can drive them in-process; `main` only parses arguments,
//! sizes the worker pool and turns errors into exit codes.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "skillroute", version, about = "Train and analyse learned model/skill routing policies")]
pub struct Cli {
    /// Worker threads for rollouts (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and write metrics, checkpoints and optional trajectories.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out tasks.
    Eval(EvalArgs),
    /// Dump episodes of a checkpoint (or the initial policy) as JSONL.
    Rollout(RolloutArgs),
    /// Validate, summarise or extend registry files.
    #[command(subcommand)]
    Registry(RegistryCommand),
    /// Theory diagnostics and experiments.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

/// Flags shared by commands that read an experiment config.
#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Override the number of training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Train on answer correctness only (format penalty logged, not optimized).
    #[arg(long)]
    pub no_format_reward: bool,
    /// Also write every rollout to trajectories.jsonl.
    #[arg(long)]
    pub log_trajectories: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Greedy,
    PassAtK,
    ScAtK,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::Greedy)]
    pub mode: EvalMode,
    /// Samples per task for pass@k / sc@k (default from config).
    #[arg(long)]
    pub k: Option<usize>,
    /// Held-out tasks (default from config).
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Policy to roll out; the initial policy when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    /// Argmax decoding instead of sampling.
    #[arg(long)]
    pub greedy: bool,
}

#[derive(Debug, Subcommand)]
pub enum RegistryCommand {
    /// Schema check only.
    Validate { path: String },
    /// Print model / skill counts and the compression ratio.
    Stats { path: String },
    /// Merge an extension pack into a registry and write the result.
    Extend {
        base: String,
        pack: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Model / skill / compatibility decomposition of the utility table.
    Compatibility {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Oracle utility, achieved utility and regret of a checkpoint.
    Regret {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Also report each task type separately.
        #[arg(long)]
        per_type: bool,
    },
    /// Oracle monotonicity and gain decomposition for a registry extension.
    Expansion {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        before: String,
        #[arg(long)]
        after: String,
        /// Policy to evaluate; the initial policy when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train and evaluate on a sequence of nested registries.
    Scaling {
        #[command(flatten)]
        common: ConfigArgs,
        /// Registries ordered by inclusion.
        #[arg(long, num_args = 1.., required = true)]
        registries: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Rollout(args) => commands::rollout(&args),
        Command::Registry(cmd) => commands::registry(&cmd),
        Command::Analyze(cmd) => commands::analyze(&cmd),
    }
}
