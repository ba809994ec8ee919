mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "tppo",
    version,
    about = "Truncated PPO on toy reasoning tasks: training, evaluation and efficiency simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy with truncated PPO or the vanilla PPO baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out tasks (avg over sampled responses).
    Eval(EvalArgs),
    /// Train both algorithms with the same config and write a side-by-side CSV.
    Compare(CompareArgs),
    /// Simulate generation walltime for full-batch versus windowed rollouts.
    Simulate(SimulateArgs),
    /// Convert a metrics.jsonl file to plot-ready CSV.
    Export(ExportArgs),
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// JSON run config; omitted keys take the desk defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of training steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Output directory.
    #[arg(long, env = "TPPO_OUT_DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Algorithm: `tppo` or `ppo` (vanilla). Overrides the config.
    #[arg(long)]
    pub algo: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A task kind (parity_chain, modular_sum, bracket_balance) or a task
    /// manifest JSON whose eval split is used.
    #[arg(long, default_value = "parity_chain")]
    pub tasks: String,
    /// Number of eval tasks when `--tasks` names a task kind.
    #[arg(long, default_value_t = 16)]
    pub num_tasks: usize,
    /// Sampled responses per task (avg@N).
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.7)]
    pub top_p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Concurrent sequences.
    #[arg(long = "K", default_value_t = 32)]
    pub k: usize,
    /// Window length.
    #[arg(long = "l", default_value_t = 32)]
    pub l: usize,
    /// Maximum response length.
    #[arg(long = "L", default_value_t = 96)]
    pub max_len: usize,
    /// `fixed`, `uniform`, `lognormal[:SIGMA[:MEDIAN]]`, or `trace:PATH`.
    #[arg(long, default_value = "fixed")]
    pub dist: String,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training cost per trained token, for the end-to-end speedup.
    #[arg(long, default_value_t = 0.0)]
    pub train_cost: f64,
    /// Per-step CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExportArgs {
    /// metrics.jsonl to read.
    #[arg(long)]
    pub input: PathBuf,
    /// CSV to write; defaults to the input path with a .csv extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    pub format: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error: usage: {line}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Export(a) => commands::export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
