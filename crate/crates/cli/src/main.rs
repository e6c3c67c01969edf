mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Personalized lane-change decision lab.
#[derive(Debug, Parser)]
#[command(name = "lanechange", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a style profile from a DecisionRecord log.
    Fit(FitArgs),
    /// Train a DQN agent for one style.
    Train(TrainArgs),
    /// Greedy rollouts, MAE against the reference line and export.
    Eval(EvalArgs),
    /// Decision agreement of RL and benchmark agents with the reference driver.
    Compare(CompareArgs),
    /// Serve driver-in-the-loop sessions over TCP.
    Serve(ServeArgs),
    /// Re-step a trace and verify it bit-exactly.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// DecisionRecord JSON Lines file.
    pub records: PathBuf,
    /// Output profile JSON path. manifest.json goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Name stored in the fitted profile.
    #[arg(long, default_value = "fitted")]
    pub name: String,
    /// Scenario config used to validate records.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Also cluster drivers into this many styles.
    #[arg(long)]
    pub cluster: Option<usize>,
    #[arg(long, default_value_t = 2022)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config JSON; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// defensive | normal | aggressive | path to a profile JSON.
    #[arg(long)]
    pub style: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of episodes.
    #[arg(long)]
    pub episodes: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub style: String,
    /// Training config whose scenario and reward settings are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub episodes: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// States for the reference-driver agreement.
    #[arg(long, default_value_t = 1000)]
    pub states: usize,
    /// Number of RL episodes exported to traces.jsonl.
    #[arg(long, default_value_t = 5)]
    pub traces: usize,
    /// Reference-driver tolerances for (t_f, t_nf, dv_nb).
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub tau: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub style: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub states: usize,
    /// Additional out-of-domain states.
    #[arg(long, default_value_t = 100)]
    pub ood: usize,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Reference-driver tolerances for (t_f, t_nf, dv_nb).
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub tau: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 7878)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Scenario config JSON.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Directory for session logs.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value_t = lanechange::dil::DEFAULT_TICK_HZ)]
    pub tick_hz: f64,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Trace JSON Lines file.
    pub trace: PathBuf,
    /// Scenario config the trace was produced with.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write manifest.json and report.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LANECHANGE_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Serve(a) => commands::serve(a),
        Command::Replay(a) => commands::replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": {
                    "kind": commands::error_kind(&e),
                    "message": format!("{e:#}"),
                }
            });
            eprintln!("{body}");
            ExitCode::from(2)
        }
    }
}
