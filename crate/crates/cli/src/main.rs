//! `pointqa`: build datasets, generate synthetic worlds, train, evaluate,
//! analyze, and serve.
//!
//! Exit status is 0 on success, 1 on an expected failure (the message says
//! why), and 2 on a usage error.

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod analyze;
mod build;
mod io;
mod learn;
mod serve;

#[derive(Parser)]
#[command(name = "pointqa", version, about = "Point-conditioned visual question answering")]
struct Cli {
    /// Worker threads (default: machine parallelism). Outputs do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the Local dataset from scene-graph annotations.
    BuildLocal(build::LocalArgs),
    /// Build the LookTwice counting dataset.
    BuildLooktwice(build::LookTwiceArgs),
    /// Build the General yes/no dataset from which-questions.
    BuildGeneral(build::GeneralArgs),
    /// Build the paired verbal (dv) and spatial (ds) datasets.
    BuildVerbalSpatial(build::GeneralArgs),
    /// Generate a synthetic world with ground-truth answers.
    Synth(build::SynthArgs),
    /// Train a model and write a checkpoint plus log.
    Train(learn::TrainArgs),
    /// Evaluate a checkpoint or baseline and write report.json.
    Evaluate(learn::EvaluateArgs),
    /// Question-swap attention analysis on a synthetic world.
    AnalyzeAttention(analyze::AttentionArgs),
    /// Per-word accuracy deltas between two evaluation reports.
    AnalyzeContextWords(analyze::ContextWordsArgs),
    /// Run every dataset constraint checker found under a directory.
    Verify(build::VerifyArgs),
    /// Draw a random review sheet from a dataset file.
    ReviewSample(build::ReviewArgs),
    /// Serve the HTTP inference API.
    Serve(serve::ServeArgs),
}

/// Flags shared by commands that read a dataset directory.
#[derive(Args, Clone)]
pub struct DataArgs {
    /// Dataset directory holding `{task}.{split}.jsonl` files.
    #[arg(long)]
    pub data: PathBuf,
    /// Task prefix; inferred when the directory holds exactly one.
    #[arg(long)]
    pub task: Option<String>,
    /// Annotation file (default: DATA/annotations.jsonl).
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Feature directory (default: DATA/features).
    #[arg(long)]
    pub features: Option<PathBuf>,
}

fn init_logging() {
    let filter = std::env::var("PQA_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    let filter = tracing_subscriber::EnvFilter::try_new(&filter).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter).with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_target(false)
        .try_init();
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.jobs {
        anyhow::ensure!(n > 0, "--jobs must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::BuildLocal(a) => build::local(a),
        Command::BuildLooktwice(a) => build::looktwice(a),
        Command::BuildGeneral(a) => build::general(a),
        Command::BuildVerbalSpatial(a) => build::verbal_spatial(a),
        Command::Synth(a) => build::synth(a),
        Command::Train(a) => learn::train(a),
        Command::Evaluate(a) => learn::evaluate(a),
        Command::AnalyzeAttention(a) => analyze::attention(a),
        Command::AnalyzeContextWords(a) => analyze::context_words(a),
        Command::Verify(a) => build::verify(a),
        Command::ReviewSample(a) => build::review_sample(a),
        Command::Serve(a) => serve::serve(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
