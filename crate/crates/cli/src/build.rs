use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use pointqa::builders::{
    build_dv_ds, build_general_dataset, build_local_dataset, build_looktwice_dataset, BuildReport, CheckResult,
    GeneralConfig, LocalConfig, LookTwiceConfig, SupercategoryMap, VerbalSpatialConfig,
};
use pointqa::dataset::{read_jsonl, read_split_files, write_split_files};
use pointqa::features::{generate_world, SynthWorldConfig};
use pointqa::store::{build_taxonomy, default_category_map, default_synonym_map, load_category_map, load_synonym_map};
use pointqa::{verify as checks, PointQAInstance, Split};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::io::{annotations, create_dir, read_json, task_prefixes, write_json};

const LOCAL_SPLITS: [Split; 4] = [Split::Train, Split::Val, Split::TestDev, Split::TestFinal];
const THREE_SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

#[derive(Args)]
pub struct LocalArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// `{"attribute": "category"}` map (default: the bundled map).
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// `{"raw": "canonical"}` synonym map (default: the bundled map).
    #[arg(long)]
    synonyms: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    iou_threshold: f64,
    /// Most frequent attributes kept before categorization.
    #[arg(long, default_value_t = 100)]
    top_k: usize,
}

#[derive(Args)]
pub struct LookTwiceArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// `{"class": "supercategory"}` map (default: the bundled map).
    #[arg(long)]
    supercategories: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Classes asked about fewer times than this are dropped.
    #[arg(long, default_value_t = 100)]
    min_class_frequency: usize,
    #[arg(long, default_value_t = 0.5)]
    dedup_iou: f64,
}

#[derive(Args)]
pub struct GeneralArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
pub struct SynthArgs {
    /// World config JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Directory of built datasets.
    #[arg(long)]
    data: PathBuf,
    /// IoU threshold the Local dataset was built with.
    #[arg(long, default_value_t = 0.2)]
    iou_threshold: f64,
    /// Also write the results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReviewArgs {
    /// A single `{task}.{split}.jsonl` file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adds image URIs to the sheet.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn finish(out: &Path, mut report: BuildReport, results: Vec<CheckResult>) -> Result<()> {
    report.checks = results;
    write_json(&out.join("report.json"), &report)?;
    for c in &report.checks {
        tracing::info!(check = %c.name, passed = c.passed, checked = c.checked, violations = c.violations);
    }
    println!("{} instances over {} images -> {}", report.instances, report.splits.values().map(|s| s.images).sum::<usize>(), out.display());
    if !report.all_checks_pass() {
        bail!("constraint checks failed; see {}", out.join("report.json").display());
    }
    Ok(())
}

fn loaded(path: &Path) -> Result<(pointqa::AnnotationStore, usize)> {
    let (store, stats) = pointqa::store::load_annotations(path).with_context(|| format!("loading {}", path.display()))?;
    Ok((store, stats.skipped))
}

pub fn local(a: LocalArgs) -> Result<()> {
    let (store, malformed) = loaded(&a.annotations)?;
    let categories = match &a.taxonomy {
        Some(p) => load_category_map(p)?,
        None => default_category_map(),
    };
    let synonyms = match &a.synonyms {
        Some(p) => load_synonym_map(p)?,
        None => default_synonym_map(),
    };
    let tax = build_taxonomy(&store, a.top_k, &synonyms, &categories)?;
    if !tax.uncategorized.is_empty() {
        tracing::warn!(attributes = ?tax.uncategorized, "attributes in the top-k cut have no category");
    }
    let mut config = LocalConfig::new(tax.taxonomy, a.seed);
    config.iou_threshold = a.iou_threshold;
    let (instances, mut report) = build_local_dataset(&store, &config)?;
    report.skip_malformed(malformed);
    create_dir(&a.out)?;
    write_split_files(&a.out, "local", &LOCAL_SPLITS, &instances)?;
    finish(&a.out, report, checks::check_local(&instances, a.iou_threshold))
}

pub fn looktwice(a: LookTwiceArgs) -> Result<()> {
    let (store, malformed) = loaded(&a.annotations)?;
    let map = match &a.supercategories {
        Some(p) => SupercategoryMap::load(p)?,
        None => SupercategoryMap::bundled(),
    };
    let mut config = LookTwiceConfig::new(map, a.seed);
    config.min_class_frequency = a.min_class_frequency;
    config.dedup_iou = a.dedup_iou;
    let (instances, mut report) = build_looktwice_dataset(&store, &config)?;
    report.skip_malformed(malformed);
    create_dir(&a.out)?;
    write_split_files(&a.out, "looktwice", &THREE_SPLITS, &instances)?;
    finish(&a.out, report, checks::check_looktwice(&instances))
}

pub fn general(a: GeneralArgs) -> Result<()> {
    let (store, malformed) = loaded(&a.annotations)?;
    let (instances, mut report) = build_general_dataset(&store, &GeneralConfig::new(a.seed))?;
    report.skip_malformed(malformed);
    create_dir(&a.out)?;
    write_split_files(&a.out, "general", &THREE_SPLITS, &instances)?;
    finish(&a.out, report, checks::check_general(&instances))
}

pub fn verbal_spatial(a: GeneralArgs) -> Result<()> {
    let (store, malformed) = loaded(&a.annotations)?;
    let (verbal, spatial, mut report) = build_dv_ds(&store, &VerbalSpatialConfig::new(a.seed))?;
    report.skip_malformed(malformed);
    create_dir(&a.out)?;
    write_split_files(&a.out, "dv", &THREE_SPLITS, &verbal)?;
    write_split_files(&a.out, "ds", &THREE_SPLITS, &spatial)?;
    finish(&a.out, report, checks::check_dv_ds(&verbal, &spatial))
}

trait SkipMalformed {
    fn skip_malformed(&mut self, n: usize);
}

impl SkipMalformed for BuildReport {
    fn skip_malformed(&mut self, n: usize) {
        if n > 0 {
            *self.skipped.entry("malformed_record".into()).or_default() += n;
        }
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut config: SynthWorldConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthWorldConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let world = generate_world(&config).map_err(|e| anyhow::anyhow!("invalid world config: {e}"))?;
    let counts = world.write(&a.out)?;
    #[derive(Serialize)]
    struct Report<'a> {
        images: usize,
        proposals: usize,
        instances: &'a std::collections::BTreeMap<String, usize>,
    }
    let proposals = world.features.iter().map(|p| p.len()).sum();
    write_json(&a.out.join("report.json"), &Report { images: world.store.len(), proposals, instances: &counts })?;
    println!("{} images, {counts:?} -> {}", world.store.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport {
    datasets: Vec<(String, Vec<CheckResult>)>,
    /// Task files present without a checker (synthetic tasks).
    unchecked: Vec<String>,
    passed: bool,
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let prefixes = task_prefixes(&a.data)?;
    if prefixes.is_empty() {
        bail!("no dataset files in {}", a.data.display());
    }
    let read = |p: &str| read_split_files(&a.data, p).with_context(|| format!("reading {p} files"));
    let mut datasets = Vec::new();
    let mut unchecked = Vec::new();
    for p in &prefixes {
        let results = match p.as_str() {
            "local" => checks::check_local(&read(p)?, a.iou_threshold),
            "looktwice" => checks::check_looktwice(&read(p)?),
            "general" => checks::check_general(&read(p)?),
            "dv" => {
                if !prefixes.contains("ds") {
                    bail!("dv files without matching ds files");
                }
                checks::check_dv_ds(&read("dv")?, &read("ds")?)
            }
            "ds" if prefixes.contains("dv") => continue,
            _ => {
                unchecked.push(p.clone());
                continue;
            }
        };
        let name = if p == "dv" { "dv+ds".to_string() } else { p.clone() };
        datasets.push((name, results));
    }
    let passed = datasets.iter().flat_map(|(_, r)| r).all(|c| c.passed);
    for (name, results) in &datasets {
        for c in results {
            let status = if c.passed { "ok" } else { "FAIL" };
            println!("{status:4} {name}/{} ({} checked, {} violations)", c.name, c.checked, c.violations);
            for ex in &c.examples {
                println!("       {ex}");
            }
        }
    }
    for p in &unchecked {
        println!("skip {p} (no checker for this task)");
    }
    if let Some(out) = &a.out {
        write_json(out, &VerifyReport { datasets, unchecked, passed })?;
    }
    if !passed {
        bail!("dataset constraints violated");
    }
    Ok(())
}

#[derive(Serialize)]
struct ReviewRow<'a> {
    qa_id: &'a str,
    image_id: &'a str,
    image_uri: &'a str,
    question: &'a str,
    point_x: Option<i32>,
    point_y: Option<i32>,
    answer: &'a str,
    /// Left blank for the reviewer.
    reviewer_answer: &'a str,
    reviewer_reason: &'a str,
}

pub fn review_sample(a: ReviewArgs) -> Result<()> {
    let instances: Vec<PointQAInstance> = read_jsonl(&a.data)?;
    let store = a.annotations.as_deref().map(annotations).transpose()?;
    let n = a.n.min(instances.len());
    if n < a.n {
        tracing::warn!(requested = a.n, available = instances.len(), "fewer instances than requested");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut picked = sample(&mut rng, instances.len(), n).into_vec();
    picked.sort_unstable();
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for i in picked {
        let inst = &instances[i];
        let uri = store.as_ref().and_then(|s| s.get(&inst.image_id)).and_then(|img| img.image_uri.as_deref()).unwrap_or("");
        w.serialize(ReviewRow {
            qa_id: &inst.qa_id,
            image_id: &inst.image_id,
            image_uri: uri,
            question: &inst.question,
            point_x: inst.point.map(|p| p.x),
            point_y: inst.point.map(|p| p.y),
            answer: &inst.answer,
            reviewer_answer: "",
            reviewer_reason: "",
        })?;
    }
    w.flush()?;
    println!("{n} rows -> {}", a.out.display());
    Ok(())
}
