use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use pointqa::checkpoint;
use pointqa::eval::{evaluate as run_eval, EvalReport, ModalA};
use pointqa::features::Strategy;
use pointqa::inputs::{Disambiguation, InputBuilder};
use pointqa::models::baseline::AnswerFrequencies;
use pointqa::models::{Architecture, Streams};
use pointqa::pipeline::{fit, score, Splits};
use pointqa::train::{write_log, TrainConfig};
use pointqa::Split;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::io::{create_dir, read_json, write_json};
use crate::DataArgs;

pub const CHECKPOINT_FILE: &str = "model.pqck";

fn parse_arch(s: &str) -> Result<Architecture, String> {
    Architecture::parse(s).ok_or_else(|| format!("unknown architecture {s:?} (pythia_local, pythia_global, mcan, lxmert)"))
}

fn parse_streams(s: &str) -> Result<Streams, String> {
    Streams::parse(s).ok_or_else(|| format!("unknown streams {s:?} (q_only, image_q, point_q, two_stream, three_stream)"))
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| format!("unknown strategy {s:?}"))
}

fn parse_disambiguation(s: &str) -> Result<Disambiguation, String> {
    Disambiguation::parse(s).ok_or_else(|| format!("unknown disambiguation {s:?} (point, none, gt_box)"))
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_arch)]
    arch: Architecture,
    /// Input streams (default: point_q for pythia_local, three_stream otherwise).
    #[arg(long, value_parser = parse_streams)]
    streams: Option<Streams>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Training config JSON (optimizer, learning_rate, schedule, patience, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy, default_value = "all_containing")]
    strategy: Strategy,
    /// Region capacity N per stream.
    #[arg(long, default_value_t = 16)]
    max_regions: usize,
    /// Seeds both initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Hidden width.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// MCAN depth; also used for every LXMERT depth when given.
    #[arg(long)]
    layers: Option<usize>,
}

/// Written into the checkpoint so evaluation and serving reuse the inputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct InputMeta {
    pub task: String,
    pub strategy: Strategy,
    pub max_regions: usize,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let task = a.data.task()?;
    let splits = Splits::from_instances(a.data.instances()?);
    let (store, features) = a.data.load()?;
    let mut tc: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(n) = a.max_iterations {
        tc.max_iterations = n;
    }
    let streams = a.streams.unwrap_or(match a.arch {
        Architecture::PythiaLocal => Streams::PointQ,
        _ => Streams::ThreeStream,
    });
    let mut mc = splits.model_config(a.arch, streams, features.dim());
    mc.seed = tc.seed;
    if let Some(d) = a.d {
        mc.d = d;
    }
    if let Some(h) = a.heads {
        mc.heads = h;
    }
    if let Some(l) = a.layers {
        (mc.layers, mc.n_l, mc.n_img, mc.n_pt, mc.n_x) = (l, l, l, l, l);
    }
    let inputs = InputBuilder::new(&store, &features, a.max_regions, a.strategy);
    tracing::info!(task = %task, arch = %a.arch, streams = %streams, train = splits.train.len(), val = splits.val.len(), "training");
    let (model, outcome) = fit(mc, &inputs, &splits, &tc, |e| {
        tracing::info!(iteration = e.iteration, loss = e.loss, val_accuracy = ?e.val_accuracy);
    })?;
    create_dir(&a.out)?;
    let meta = InputMeta { task, strategy: a.strategy, max_regions: a.max_regions };
    checkpoint::save(&model, &a.out.join(CHECKPOINT_FILE), json!({ "inputs": meta, "train": tc }))?;
    write_log(&a.out.join("train_log.jsonl"), &outcome.log)?;
    write_json(
        &a.out.join("report.json"),
        &json!({
            "best_iteration": outcome.best_iteration,
            "best_val_accuracy": outcome.best_val_accuracy,
            "iterations_run": outcome.iterations_run,
            "stopped_early": outcome.stopped_early,
        }),
    )?;
    println!("best val accuracy {:.4} at iteration {} -> {}", outcome.best_val_accuracy, outcome.best_iteration, a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Checkpoint file or a training output directory.
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a baseline instead of a checkpoint.
    #[arg(long, value_parser = ["modal_a"])]
    baseline: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    /// Split to score; `test` covers every held-out split other than val.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_parser = parse_disambiguation, default_value = "point")]
    disambiguation: Disambiguation,
    #[arg(long)]
    out: PathBuf,
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let all = a.data.instances()?;
    let instances: Vec<_> = match a.split.as_str() {
        "test" => Splits::from_instances(all.clone()).test,
        s => {
            let split = Split::parse(s).with_context(|| format!("unknown split {s:?}"))?;
            all.iter().filter(|i| i.split == split).cloned().collect()
        }
    };
    if instances.is_empty() {
        bail!("no instances in split {}", a.split);
    }
    let report: EvalReport = match &a.checkpoint {
        Some(path) => {
            let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.clone() };
            let (model, header) = checkpoint::load(&file).with_context(|| format!("loading {}", file.display()))?;
            let meta: InputMeta = serde_json::from_value(header.metadata["inputs"].clone())
                .context("checkpoint lacks input metadata")?;
            let (store, features) = a.data.load()?;
            let inputs = InputBuilder::new(&store, &features, meta.max_regions, meta.strategy);
            let label = format!("{}/{}/{}", model.config.architecture, model.config.streams, a.split);
            score(&model, &inputs, a.disambiguation, &instances, &label)?
        }
        None => {
            let train = all.iter().filter(|i| i.split == Split::Train);
            let predictor = ModalA { frequencies: AnswerFrequencies::from_instances(train) };
            run_eval(&predictor, &instances, &format!("modal_a/{}", a.split))?
        }
    };
    create_dir(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    println!(
        "{}: {:.4} ({}/{}) -> {}",
        report.label,
        report.overall.accuracy,
        report.overall.correct,
        report.overall.total,
        a.out.display()
    );
    Ok(())
}
