//! `dzlab`: simulate, collect, train, evaluate and report.

mod commands;
mod config;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dzlab::model::{KeyMix, ModelKind};
use dzlab::Error;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "dzlab", version, about = "Dilemma-zone stop-or-go laboratory")]
pub struct Cli {
    /// JSON run configuration; defaults to $DZLAB_CONFIG when set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Roll out persona episodes to JSONL.
    Simulate(SimulateArgs),
    /// Run the live session service.
    Collect(CollectArgs),
    /// Train one predictor and write its checkpoint.
    Train(TrainArgs),
    /// Score checkpoints, or train and compare all three models per seed.
    Eval(EvalArgs),
    /// Render behavior, decision-timing and accuracy tables and figures.
    Report(ReportArgs),
    /// Calibrate persona go biases to their target go shares.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Persona fixture JSON; the bundled four-driver fleet when omitted.
    #[arg(long)]
    pub personas: Option<PathBuf>,
    #[arg(long)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write tick-level CSV.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args, Debug)]
pub struct CollectArgs {
    /// Address to listen on, e.g. 127.0.0.1:7878.
    #[arg(long)]
    pub serve: String,
    /// Directory of per-driver episode JSONL files.
    #[arg(long)]
    pub store: PathBuf,
    /// Lockstep mode: each control message advances one tick.
    #[arg(long)]
    pub fast: bool,
    /// Seed for sessions started without one.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Episode JSONL file, or a directory of them.
    #[arg(long)]
    pub episodes: PathBuf,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct HyperArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = parse_k_mix)]
    pub k_mix: Option<KeyMix>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_kind)]
    pub variant: ModelKind,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Split and initialization seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Checkpoint directories written by `train`. When omitted, all three
    /// models are trained and compared for every seed.
    #[arg(long, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    /// Comma-separated seeds for the comparison run.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Episode JSONL file, or a directory of them.
    #[arg(long)]
    pub episodes: PathBuf,
    /// Output directory of `eval`; its prediction dump adds the accuracy table.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub personas: Option<PathBuf>,
    /// Episodes per persona and bisection step.
    #[arg(long, default_value_t = 2000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Where to write the calibrated persona file.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_k_mix(s: &str) -> Result<KeyMix, String> {
    match s {
        "off" => Ok(KeyMix::Off),
        "add" => Ok(KeyMix::Add),
        "gate" => Ok(KeyMix::Gate),
        other => Err(format!("unknown k_mix {other:?}; expected off, add or gate")),
    }
}

/// Usage-class failures exit with 2, everything else with 1.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Domain(_) => "domain",
        Error::Config(_) => "config",
        Error::Shape(_) => "shape",
        Error::Numeric { .. } => "numeric",
        Error::Diverged { .. } => "diverged",
        Error::Parse { .. } => "parse",
        Error::Conflict(_) => "conflict",
        Error::Rejected(_) => "rejected",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let record = json!({"error": {"kind": kind(&e), "message": e.to_string(), "exit_code": code}});
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
