//! `sim2piano`: train, evaluate and deploy piano-playing policies.

mod commands;
mod config;
mod error;

use clap::{Args, Parser, Subcommand};
use error::CliError;
use sim2piano::exec_modes::Mode;
use sim2piano::metrics::Aggregation;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "sim2piano", version, about = "Train, evaluate and deploy piano-playing robot hand policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration; flags override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every source of randomness
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parallel workers for experiment grids (default: physical cores)
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Settings of the simulated proxy plant or the hardware bridge.
#[derive(Debug, Args, Clone, Default)]
pub struct PlantArgs {
    /// Offset of the proxy plant from nominal parameters (0 = identical)
    #[arg(long)]
    pub proxy_scale: Option<f64>,
    /// Relative per-run jitter of the proxy parameters
    #[arg(long)]
    pub proxy_jitter: Option<f64>,
    /// Drive a device speaking the bridge protocol at HOST:PORT instead of the proxy
    #[arg(long, value_name = "HOST:PORT")]
    pub bridge: Option<String>,
    /// Reply deadline of the bridge in milliseconds
    #[arg(long)]
    pub deadline_ms: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy on one song and save its best checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint in simulation and on the plant
    Eval(EvalArgs),
    /// Run one episode and write its log as JSON lines
    Rollout(RolloutArgs),
    /// Re-score an episode log
    Score(ScoreArgs),
    /// Convert a song between MIDI and the text format
    ConvertSong(ConvertArgs),
    /// Evaluate stored checkpoints on the song suite
    Suite(GridArgs),
    /// Execution-mode ablation over the song suite
    CompareModes(GridArgs),
    /// Train and evaluate across DR intensities
    DrSweep(SweepArgs),
    /// Serve the proxy plant over the bridge protocol
    ServePlant(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Song file (text or MIDI) or fixture name
    #[arg(long)]
    pub song: String,
    /// Domain randomization intensity in [0, 1]
    #[arg(long)]
    pub cdr: Option<f64>,
    /// Environment steps to train for
    #[arg(long)]
    pub steps: Option<u64>,
    /// Where to write the best checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the final checkpoint here
    #[arg(long, value_name = "FILE")]
    pub last: Option<PathBuf>,
    /// Write the learning curve as CSV
    #[arg(long, value_name = "FILE")]
    pub curve: Option<PathBuf>,
    /// Stop once a deterministic evaluation reaches this F1
    #[arg(long)]
    pub target_f1: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Song file (text or MIDI) or fixture name
    #[arg(long)]
    pub song: String,
    /// Execution mode: mirror, hybrid or real
    #[arg(long, default_value = "hybrid")]
    pub mode: Mode,
    /// Plant executions
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    /// Score aggregation: micro or per_step
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
    /// Write result rows here instead of stdout
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub plant: PlantArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Song file (text or MIDI) or fixture name
    #[arg(long)]
    pub song: String,
    /// Checkpoint to run; the scripted player is used when absent
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Run against the plant in this mode instead of the bare simulator
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Episode log destination (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
    /// Sample actions from the policy instead of taking its mean
    #[arg(long)]
    pub stochastic: bool,
    #[command(flatten)]
    pub plant: PlantArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Episode log written by rollout
    #[arg(long)]
    pub log: PathBuf,
    /// Score aggregation: micro or per_step
    #[arg(long, default_value = "micro")]
    pub aggregation: Aggregation,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Input song; .mid/.midi is read as MIDI, anything else as text
    #[arg(long)]
    pub input: PathBuf,
    /// Output song; the extension selects the format
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Directory holding the checkpoints
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    /// Directory for CSV and SVG outputs
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Train the needed checkpoints first
    #[arg(long)]
    pub train: bool,
    /// Comma-separated songs (fixture names or files)
    #[arg(long, value_delimiter = ',')]
    pub songs: Option<Vec<String>>,
    /// Comma-separated training seeds
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Plant executions per model
    #[arg(long)]
    pub runs: Option<usize>,
    /// Training steps per model when training
    #[arg(long)]
    pub steps: Option<u64>,
    #[command(flatten)]
    pub plant: PlantArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Directory for CSV and SVG outputs
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also store every trained checkpoint here
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
    /// Song to train on (fixture name or file)
    #[arg(long)]
    pub song: Option<String>,
    /// Comma-separated DR intensities
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Runs per intensity, replacing the default schedule
    #[arg(long)]
    pub runs: Option<usize>,
    /// Training steps per run
    #[arg(long)]
    pub steps: Option<u64>,
    #[command(flatten)]
    pub plant: PlantArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Address to listen on
    #[arg(long, default_value = "127.0.0.1:7070")]
    pub listen: String,
    /// Exit after the first connection closes
    #[arg(long)]
    pub once: bool,
    #[command(flatten)]
    pub plant: PlantArgs,
    #[command(flatten)]
    pub common: Common,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(first).line());
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
