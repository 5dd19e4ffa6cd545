use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use pointqa::analysis::{attention_swap, context_word_analysis};
use pointqa::checkpoint;
use pointqa::eval::{EvalReport, ModelPredictor};
use pointqa::features::{generate_world, SynthTask, SynthWorldConfig};
use pointqa::inputs::InputBuilder;
use pointqa::Split;

use crate::io::{create_dir, read_json, write_json};
use crate::learn::{InputMeta, CHECKPOINT_FILE};

#[derive(Args)]
pub struct AttentionArgs {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Synthetic world directory (written by `synth`) with a part class.
    #[arg(long)]
    world: PathBuf,
    /// Keep pairs on training images too.
    #[arg(long)]
    include_train: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn attention(a: AttentionArgs) -> Result<()> {
    let config: SynthWorldConfig = read_json(&a.world.join("world.json"))?;
    if config.part.is_none() {
        bail!("world has no part class, so no question-swap pairs exist");
    }
    // generation is seeded, so the directory's world comes back exactly
    let world = generate_world(&config).map_err(|e| anyhow::anyhow!("invalid world config: {e}"))?;
    let train_images: BTreeSet<String> = world
        .task_instances(SynthTask::Local)?
        .into_iter()
        .filter(|i| i.split == Split::Train)
        .map(|i| i.image_id)
        .collect();
    let pairs: Vec<_> = world
        .attention_swap_pairs()
        .into_iter()
        .filter(|(p, _)| a.include_train || !train_images.contains(&p.image_id))
        .collect();
    if pairs.is_empty() {
        bail!("no question-swap pairs to analyze");
    }
    let file = if a.checkpoint.is_dir() { a.checkpoint.join(CHECKPOINT_FILE) } else { a.checkpoint.clone() };
    let (model, header) = checkpoint::load(&file).with_context(|| format!("loading {}", file.display()))?;
    let meta: InputMeta = serde_json::from_value(header.metadata["inputs"].clone()).context("checkpoint lacks input metadata")?;
    let inputs = InputBuilder::new(&world.store, &world.features, meta.max_regions, meta.strategy);
    let analysis = attention_swap(&ModelPredictor { model: &model, inputs }, &pairs)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("attention.json"), &analysis)?;
    println!(
        "{} pairs: median area {:.0} -> {:.0}, {} up / {} down, p = {:.3e}",
        analysis.pairs, analysis.median_area_before, analysis.median_area_after, analysis.increases, analysis.decreases, analysis.p_value
    );
    Ok(())
}

#[derive(Args)]
pub struct ContextWordsArgs {
    /// Report of the model with more context (e.g. three_stream).
    #[arg(long)]
    a: PathBuf,
    /// Report of the baseline model (e.g. point_q).
    #[arg(long)]
    b: PathBuf,
    /// Comma-separated words.
    #[arg(long, value_delimiter = ',', default_value = "largest,smallest,biggest,closest,farthest,tallest")]
    words: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

pub fn context_words(a: ContextWordsArgs) -> Result<()> {
    let ra: EvalReport = read_json(&a.a)?;
    let rb: EvalReport = read_json(&a.b)?;
    let words: Vec<&str> = a.words.iter().map(String::as_str).collect();
    let report = context_word_analysis(&ra, &rb, &words)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("context_words.json"), &report)?;
    println!("overall delta {:+.4}", report.overall_delta);
    for w in &report.words {
        match w.delta {
            Some(d) => println!("{:>10} {:+.4} over {}", w.word, d, w.count),
            None => println!("{:>10} absent", w.word),
        }
    }
    Ok(())
}
