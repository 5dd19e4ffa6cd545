//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p pointqa-cli --test acceptance -- 5 8`.
//!
//! Timed training runs inside a one-thread pool, so the wall-clock time
//! reported is an upper bound on the CPU time spent.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use pointqa::analysis::attention_swap;
use pointqa::builders::{
    build_dv_ds, build_general_dataset, build_looktwice_dataset, CheckResult, GeneralConfig, LookTwiceConfig,
    SupercategoryMap, VerbalSpatialConfig,
};
use pointqa::checkpoint;
use pointqa::dataset::QuestionForm;
use pointqa::eval::{evaluate, ModalA, ModelPredictor, Predictor};
use pointqa::features::{
    generate_world, select_regions, Composition, PartSpec, ProposalSet, Strategy, SynthTask, SynthWorld,
    SynthWorldConfig,
};
use pointqa::geometry::iou;
use pointqa::inputs::{Disambiguation, InputBuilder};
use pointqa::models::baseline::AnswerFrequencies;
use pointqa::models::{Architecture, Model, ModelConfig, Regions, Sample, Streams, Vocabulary};
use pointqa::nn::Mat;
use pointqa::pipeline::{fit, score, Splits};
use pointqa::train::TrainConfig;
use pointqa::verify::{check_dv_ds, check_general, check_local, check_looktwice};
use pointqa::{BoundingBox, Point, PointQAInstance, Split};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LOCAL_IOU: f64 = 0.2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool").install(f)
}

fn pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("pool").install(f)
}

fn timed<T: Send>(f: impl FnOnce() -> T + Send) -> (T, Duration) {
    single_thread(|| {
        let t = Instant::now();
        let out = f();
        (out, t.elapsed())
    })
}

fn small(mut c: ModelConfig, d: usize) -> ModelConfig {
    c.d = d;
    c.heads = 2;
    (c.layers, c.n_l, c.n_img, c.n_pt, c.n_x) = (1, 1, 1, 1, 1);
    c
}

fn train_config(max_iterations: usize, patience: usize) -> TrainConfig {
    TrainConfig { max_iterations, patience, eval_interval: 100, ..TrainConfig::default() }
}

/// Datasets built once and shared by the dataset and oracle criteria.
struct Fixtures {
    world: SynthWorld,
    local: Vec<PointQAInstance>,
    looktwice: Vec<PointQAInstance>,
    general: Vec<PointQAInstance>,
    verbal: Vec<PointQAInstance>,
    spatial: Vec<PointQAInstance>,
    count: Vec<PointQAInstance>,
    comparative: Vec<PointQAInstance>,
}

fn fixture_world() -> SynthWorldConfig {
    SynthWorldConfig {
        num_images: 300,
        source_questions: true,
        tasks: vec![SynthTask::Local, SynthTask::Count, SynthTask::Comparative],
        seed: 11,
        ..SynthWorldConfig::default()
    }
}

fn build_fixtures() -> Result<Fixtures> {
    let world = generate_world(&fixture_world()).map_err(anyhow::Error::msg)?;
    let local = world.task_instances(SynthTask::Local)?;
    let count = world.task_instances(SynthTask::Count)?;
    let comparative = world.task_instances(SynthTask::Comparative)?;
    let (looktwice, _) = build_looktwice_dataset(&world.store, &LookTwiceConfig::new(SupercategoryMap::bundled(), 3))?;
    let (general, _) = build_general_dataset(&world.store, &GeneralConfig::new(3))?;
    let (verbal, spatial, _) = build_dv_ds(&world.store, &VerbalSpatialConfig::new(3))?;
    for (name, set) in [("local", &local), ("looktwice", &looktwice), ("general", &general), ("dv", &verbal)] {
        ensure!(!set.is_empty(), "fixture {name} is empty");
    }
    Ok(Fixtures { world, local, looktwice, general, verbal, spatial, count, comparative })
}

// ---------------------------------------------------------------- 1

fn criterion_1(fx: &Fixtures) -> Result<Outcome> {
    let t = Instant::now();
    let splits = Splits::from_instances(fx.general.clone());
    let eval_splits: BTreeSet<Split> = fx.general.iter().map(|i| i.split).filter(|s| s.is_eval()).collect();
    ensure!(!eval_splits.is_empty(), "general fixture has no eval split");
    let inputs = InputBuilder::new(&fx.world.store, &fx.world.features, 16, Strategy::AllContaining);
    let mut lines = Vec::new();
    let mut pass = true;
    for (arch, streams) in [
        (Architecture::PythiaLocal, Streams::QOnly),
        (Architecture::PythiaLocal, Streams::ImageQ),
        (Architecture::Mcan, Streams::QOnly),
        (Architecture::Mcan, Streams::ImageQ),
    ] {
        let config = small(splits.model_config(arch, streams, fx.world.features.dim()), 16);
        let (model, _) = fit(config, &inputs, &splits, &train_config(200, 200), |_| {})?;
        for split in &eval_splits {
            let insts: Vec<_> = fx.general.iter().filter(|i| i.split == *split).cloned().collect();
            let r = score(&model, &inputs, Disambiguation::Point, &insts, "c1")?;
            pass &= r.overall.correct * 2 == r.overall.total;
            lines.push(format!("{arch}/{streams}/{} {}/{}", split.as_str(), r.overall.correct, r.overall.total));
        }
    }
    pass &= t.elapsed() < Duration::from_secs(60);
    outcome(pass, format!("{} in {:.0?}", lines.join(", "), t.elapsed()))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Result<Outcome> {
    let world = generate_world(&SynthWorldConfig { num_images: 300, ..SynthWorldConfig::default() }).map_err(anyhow::Error::msg)?;
    // every image must hold two same-class objects of different colors
    let shaped = world.oracle.images.values().all(|img| {
        let mut by_class: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for o in img.objects.iter().filter(|o| o.part_of.is_none()) {
            by_class.entry(&o.class).or_default().insert(o.color.as_deref().unwrap_or(""));
        }
        by_class.values().any(|colors| colors.len() >= 2)
    });
    ensure!(shaped && world.config.colors.len() == 4, "world does not match the criterion's shape");
    let splits = Splits::from_instances(world.task_instances(SynthTask::Local)?);
    let tc = train_config(1500, 600);
    let run = |strategy| {
        let inputs = InputBuilder::new(&world.store, &world.features, 16, strategy);
        let config = small(splits.model_config(Architecture::PythiaLocal, Streams::PointQ, world.features.dim()), 32);
        timed(|| fit(config, &inputs, &splits, &tc, |_| {}))
    };
    let (ours, t_ours) = run(Strategy::AllContaining);
    let (full, t_full) = run(Strategy::FullImage);
    let (ours, full) = (ours?.1, full?.1);
    let budget = Duration::from_secs(300);
    let pass = ours.best_val_accuracy >= 0.95 && t_ours <= budget && full.best_val_accuracy <= 0.60 && t_full <= budget;
    outcome(
        pass,
        format!(
            "all_containing val {:.3} in {t_ours:.0?}; full_image val {:.3} in {t_full:.0?} (same 1500-iteration budget)",
            ours.best_val_accuracy, full.best_val_accuracy
        ),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Result<Outcome> {
    let cfg = SynthWorldConfig {
        num_images: 600,
        classes: ["car", "dog", "cup"].map(String::from).to_vec(),
        composition: Composition::CountBalanced { max_per_class: 4 },
        tasks: vec![SynthTask::Count],
        ..SynthWorldConfig::default()
    };
    let world = generate_world(&cfg).map_err(anyhow::Error::msg)?;
    let splits = Splits::from_instances(world.task_instances(SynthTask::Count)?);
    let inputs = InputBuilder::new(&world.store, &world.features, 16, Strategy::AllContaining);
    let tc = train_config(5000, 2000);
    let mut cells = Vec::new();
    let mut total = Duration::ZERO;
    for (arch, streams) in [(Architecture::PythiaGlobal, Streams::ThreeStream), (Architecture::PythiaLocal, Streams::PointQ)] {
        let mut config = splits.model_config(arch, streams, world.features.dim());
        config.d = 32;
        let (fitted, t) = timed(|| fit(config, &inputs, &splits, &tc, |_| {}));
        total += t;
        let report = score(&fitted?.0, &inputs, Disambiguation::Point, &splits.test, "c3")?;
        cells.push(report.answers_cell(&["2", ">2"]));
    }
    let gap = (cells[0].accuracy - cells[1].accuracy) * 100.0;
    let pass = gap >= 5.0 && total <= Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "answer>=2: global {:.3} vs local {:.3} ({gap:+.1} points over {} instances) in {total:.0?}",
            cells[0].accuracy, cells[1].accuracy, cells[0].total
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Result<Outcome> {
    let cfg = SynthWorldConfig {
        num_images: 2000,
        scale_range: (0.4, 1.0),
        min_area_ratio: 1.5,
        jitter_proposals: 2,
        spurious_proposals: 2,
        composition: Composition::Mixed { objects_per_image: (2, 3), min_same_class: 2 },
        tasks: vec![SynthTask::Comparative],
        comparative_words: vec!["largest".into()],
        ..SynthWorldConfig::default()
    };
    let world = generate_world(&cfg).map_err(anyhow::Error::msg)?;
    let splits = Splits::from_instances(world.task_instances(SynthTask::Comparative)?);
    let inputs = InputBuilder::new(&world.store, &world.features, 16, Strategy::AllContaining);
    let tc = TrainConfig { learning_rate: 0.001, schedule: true, ..train_config(2500, 4000) };
    let mut reports = Vec::new();
    let mut total = Duration::ZERO;
    for streams in [Streams::ThreeStream, Streams::PointQ] {
        let config = small(splits.model_config(Architecture::Mcan, streams, world.features.dim()), 32);
        let (fitted, t) = timed(|| fit(config, &inputs, &splits, &tc, |_| {}));
        total += t;
        reports.push(score(&fitted?.0, &inputs, Disambiguation::Point, &splits.test, "c4")?);
    }
    let overall = (reports[0].overall.accuracy - reports[1].overall.accuracy) * 100.0;
    let word = |r: &pointqa::eval::EvalReport| r.by_category.get("largest").map_or(0.0, |c| c.accuracy);
    let per_word = (word(&reports[0]) - word(&reports[1])) * 100.0;
    let pass = overall >= 5.0 && per_word > overall && total <= Duration::from_secs(900);
    outcome(
        pass,
        format!(
            "three_stream {:.3} vs point_q {:.3} ({overall:+.1}); \"largest\" {:.3} vs {:.3} ({per_word:+.1}) in {total:.0?}",
            reports[0].overall.accuracy,
            reports[1].overall.accuracy,
            word(&reports[0]),
            word(&reports[1])
        ),
    )
}

// ---------------------------------------------------------------- 5

#[derive(Clone, Copy)]
struct IBox {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
}

impl IBox {
    fn random(rng: &mut ChaCha8Rng, extent: i64, max_side: i64) -> Self {
        IBox { x: rng.random_range(0..extent), y: rng.random_range(0..extent), w: rng.random_range(1..=max_side), h: rng.random_range(1..=max_side) }
    }

    fn to_box(self) -> BoundingBox {
        BoundingBox::new(self.x as f64, self.y as f64, self.w as f64, self.h as f64).expect("valid box")
    }

    fn holds(self, px: i64, py: i64) -> bool {
        (self.x..self.x + self.w).contains(&px) && (self.y..self.y + self.h).contains(&py)
    }

    fn cells(self) -> BTreeSet<(i64, i64)> {
        (self.x..self.x + self.w).flat_map(|i| (self.y..self.y + self.h).map(move |j| (i, j))).collect()
    }
}

/// (intersection, union) cell counts.
fn cell_overlap(a: IBox, b: IBox) -> (i64, i64) {
    let (ca, cb) = (a.cells(), b.cells());
    (ca.intersection(&cb).count() as i64, ca.union(&cb).count() as i64)
}

/// Selection recomputed from scratch with integer arithmetic.
fn oracle_select(boxes: &[IBox], scores: &[f32], p: (i64, i64), gt: IBox, strategy: Strategy, n: usize) -> (Vec<usize>, bool) {
    let idx: Vec<usize> = (0..boxes.len()).collect();
    let first_min = |cands: &[usize], key: &dyn Fn(usize, usize) -> std::cmp::Ordering| -> Vec<usize> {
        let mut best: Option<usize> = None;
        for &i in cands {
            if best.is_none_or(|b| key(i, b) == std::cmp::Ordering::Less) {
                best = Some(i);
            }
        }
        best.into_iter().collect()
    };
    // doubled coordinates keep the center distance integral
    let dist = |i: usize| {
        let b = boxes[i];
        (2 * b.x + b.w - 2 * p.0).pow(2) + (2 * b.y + b.h - 2 * p.1).pow(2)
    };
    let (mut chosen, fallback) = match strategy {
        Strategy::FullImage => (idx.clone(), false),
        Strategy::GtBox => {
            let hits: Vec<usize> = idx
                .iter()
                .copied()
                .filter(|&i| {
                    let (inter, union) = cell_overlap(boxes[i], gt);
                    2 * inter >= union
                })
                .collect();
            if hits.is_empty() {
                let more = |a: usize, b: usize| {
                    let ((ia, ua), (ib, ub)) = (cell_overlap(boxes[a], gt), cell_overlap(boxes[b], gt));
                    (ib * ua).cmp(&(ia * ub))
                };
                (first_min(&idx, &more), true)
            } else {
                (hits, false)
            }
        }
        _ => {
            let hits: Vec<usize> = idx.iter().copied().filter(|&i| boxes[i].holds(p.0, p.1)).collect();
            if hits.is_empty() {
                (first_min(&idx, &|a, b| dist(a).cmp(&dist(b))), true)
            } else {
                let picked = match strategy {
                    Strategy::TopScore => first_min(&hits, &|a, b| scores[b].total_cmp(&scores[a])),
                    Strategy::Smallest => first_min(&hits, &|a, b| (boxes[a].w * boxes[a].h).cmp(&(boxes[b].w * boxes[b].h))),
                    _ => hits,
                };
                (picked, false)
            }
        }
    };
    if chosen.len() > n {
        chosen.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        chosen.truncate(n);
        chosen.sort();
    }
    (chosen, fallback)
}

fn select_cases(cases: usize) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let strategies = [Strategy::AllContaining, Strategy::TopScore, Strategy::Smallest, Strategy::FullImage, Strategy::GtBox];
    let mut mismatches = 0;
    for case in 0..cases {
        let count = rng.random_range(1..=12);
        let boxes: Vec<IBox> = (0..count).map(|_| IBox::random(&mut rng, 30, 15)).collect();
        let scores: Vec<f32> = (0..count).map(|_| [0.1f32, 0.5, 0.9][rng.random_range(0..3)]).collect();
        let dim = 3;
        let feats = Mat::from_shape_fn((count, dim), |_| rng.random_range(-1.0..1.0)).mapv(|v| v as f32);
        let props = ProposalSet::new(format!("case{case}"), boxes.iter().map(|b| b.to_box()).collect(), scores.clone(), feats.clone())?;
        let p = (rng.random_range(-2..46), rng.random_range(-2..46));
        let gt = IBox::random(&mut rng, 30, 15);
        let strategy = strategies[case % strategies.len()];
        let n = rng.random_range(1..=6);
        let got = select_regions(&props, Some(Point::new(p.0 as i32, p.1 as i32)), Some(&gt.to_box()), strategy, n)?;
        let (want, fallback) = oracle_select(&boxes, &scores, p, gt, strategy, n);
        let mut ok = got.indices == want && got.fallback == fallback && got.mask.len() == n;
        for row in 0..n {
            let real = want.get(row);
            ok &= got.mask[row] == real.is_some();
            for c in 0..dim {
                let expect = real.map_or(0.0, |&i| f64::from(feats[[i, c]]));
                ok &= got.features[[row, c]] == expect;
            }
        }
        mismatches += usize::from(!ok);
    }
    Ok(mismatches)
}

fn iou_cases(cases: usize) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..cases {
        let (a, b) = (IBox::random(&mut rng, 20, 10), IBox::random(&mut rng, 20, 10));
        let (inter, union) = cell_overlap(a, b);
        let want = inter as f64 / union as f64;
        mismatches += usize::from(iou(&a.to_box(), &b.to_box())? != want);
    }
    Ok(mismatches)
}

fn hashed(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100000001b3))
}

/// Recounts `evaluate` for several predictors on every fixture dataset.
fn evaluate_recounts(fx: &Fixtures) -> Result<(usize, usize)> {
    let datasets: [(&str, &[PointQAInstance]); 7] = [
        ("local", &fx.local),
        ("looktwice", &fx.looktwice),
        ("general", &fx.general),
        ("dv", &fx.verbal),
        ("ds", &fx.spatial),
        ("count", &fx.count),
        ("comparative", &fx.comparative),
    ];
    let mut checked = 0;
    let mut mismatches = 0;
    for (_, insts) in datasets {
        let answers: Vec<String> = insts.iter().map(|i| i.answer.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let pick = move |i: &PointQAInstance| answers[(hashed(&i.qa_id) % answers.len() as u64) as usize].clone();
        let always_yes = |_: &PointQAInstance| "yes".to_string();
        let predictors: [(&dyn Predictor, &dyn Fn(&PointQAInstance) -> String); 2] = [(&pick, &pick), (&always_yes, &always_yes)];
        for (predictor, reference) in predictors {
            let report = evaluate(predictor, insts, "recount")?;
            let correct = insts.iter().filter(|i| reference(i) == i.answer).count();
            let mut by_answer: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for i in insts.iter() {
                let e = by_answer.entry(&i.answer).or_default();
                e.0 += usize::from(reference(i) == i.answer);
                e.1 += 1;
            }
            let ok = report.overall.correct == correct
                && report.overall.total == insts.len()
                && report.overall.accuracy == correct as f64 / insts.len() as f64
                && by_answer.iter().all(|(a, (c, t))| report.by_answer.get(*a).is_some_and(|cell| cell.correct == *c && cell.total == *t));
            checked += 1;
            mismatches += usize::from(!ok);
        }
    }

    // Modal-A on Local against answer sets rebuilt from the world's ground truth
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for i in fx.local.iter().filter(|i| i.split == Split::Train) {
        *freq.entry(&i.answer).or_default() += 1;
    }
    let held_out: Vec<PointQAInstance> = fx.local.iter().filter(|i| i.split != Split::Train).cloned().collect();
    let mut expected_correct = 0;
    for i in &held_out {
        let img = &fx.world.oracle.images[&i.image_id];
        let class = i.meta.object_class.as_deref().context("local instance without class")?;
        let valid: BTreeSet<&str> = img.objects.iter().filter(|o| o.class == class).filter_map(|o| o.color.as_deref()).collect();
        let best = valid.iter().copied().max_by(|a, b| freq.get(a).unwrap_or(&0).cmp(freq.get(b).unwrap_or(&0)).then_with(|| b.cmp(a)));
        expected_correct += usize::from(best == Some(i.answer.as_str()));
    }
    let modal = ModalA { frequencies: AnswerFrequencies::from_instances(fx.local.iter().filter(|i| i.split == Split::Train)) };
    let report = evaluate(&modal, &held_out, "modal_a")?;
    checked += 1;
    mismatches += usize::from(report.overall.correct != expected_correct || report.overall.total != held_out.len());
    Ok((checked, mismatches))
}

fn criterion_5(fx: &Fixtures) -> Result<Outcome> {
    let select = select_cases(10_000)?;
    let overlap = iou_cases(1_000)?;
    let (checked, eval) = evaluate_recounts(fx)?;
    outcome(
        select == 0 && overlap == 0 && eval == 0,
        format!("select_regions {select}/10000 mismatches; iou {overlap}/1000; evaluate {eval}/{checked} recounts differ"),
    )
}

// ---------------------------------------------------------------- 6

fn recount_local(insts: &[PointQAInstance], fx: &Fixtures) -> usize {
    let mut bad = 0;
    for i in insts {
        let img = &fx.world.oracle.images[&i.image_id];
        let me = img.objects.iter().find(|o| Some(&o.object_id) == i.meta.object_id.as_ref());
        let ok = me.is_some_and(|me| {
            // another same-class object answers differently and barely overlaps
            img.objects.iter().any(|o| {
                o.object_id != me.object_id && o.class == me.class && o.color != me.color && iou(&o.bbox, &me.bbox).is_ok_and(|v| v < LOCAL_IOU)
            }) && me.color.as_deref() == Some(i.answer.as_str())
        });
        bad += usize::from(!ok);
    }
    bad
}

fn recount_looktwice(insts: &[PointQAInstance]) -> usize {
    let mut per_image: BTreeMap<&str, Vec<&PointQAInstance>> = BTreeMap::new();
    for i in insts.iter().filter(|i| i.split != Split::Train) {
        per_image.entry(&i.image_id).or_default();
        if i.meta.question_form == Some(QuestionForm::Object) {
            per_image.entry(&i.image_id).or_default().push(i);
        }
    }
    per_image
        .values()
        .filter(|qs| {
            !qs.iter().any(|a| qs.iter().any(|b| a.meta.object_class != b.meta.object_class && a.answer != b.answer))
        })
        .count()
}

fn recount_general(insts: &[PointQAInstance]) -> usize {
    let mut bad = 0;
    let mut per_split: BTreeMap<Split, (usize, usize)> = BTreeMap::new();
    let mut pairs: BTreeMap<&str, Vec<&PointQAInstance>> = BTreeMap::new();
    for i in insts {
        let e = per_split.entry(i.split).or_default();
        match i.answer.as_str() {
            "yes" => e.0 += 1,
            "no" => e.1 += 1,
            _ => bad += 1,
        }
        match i.meta.source_qa_id.as_deref() {
            Some(src) => pairs.entry(src).or_default().push(i),
            None => bad += 1,
        }
    }
    bad += per_split.values().filter(|(y, n)| y != n).count();
    for members in pairs.values() {
        let complete = members.len() == 2 && members[0].answer != members[1].answer && members[0].split == members[1].split && members[0].question == members[1].question;
        bad += usize::from(!complete);
    }
    bad
}

fn all_pass(results: &[CheckResult]) -> bool {
    results.iter().all(|c| c.passed)
}

fn run_cli(args: &[&str]) -> Result<std::process::Output> {
    let out = Command::new(env!("CARGO_BIN_EXE_pointqa")).args(args).env("PQA_LOG_LEVEL", "warn").output()?;
    Ok(out)
}

fn cli_ok(args: &[&str]) -> Result<()> {
    let out = run_cli(args)?;
    ensure!(out.status.success(), "pointqa {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn write_world_config(dir: &Path, cfg: &SynthWorldConfig) -> Result<String> {
    let path = dir.join("world-config.json");
    std::fs::write(&path, serde_json::to_string(cfg)?)?;
    Ok(path.display().to_string())
}

/// Synthesizes a world with the CLI and builds all four datasets from it.
fn cli_build_all(root: &Path, jobs: &str) -> Result<()> {
    let cfg = SynthWorldConfig { num_images: 300, source_questions: true, ..SynthWorldConfig::default() };
    let config = write_world_config(root, &cfg)?;
    let world = root.join("world");
    let data = root.join("data");
    let (w, d) = (world.display().to_string(), data.display().to_string());
    let ann = world.join("annotations.jsonl").display().to_string();
    cli_ok(&["--jobs", jobs, "synth", "--config", &config, "--out", &w])?;
    cli_ok(&["--jobs", jobs, "build-local", "--annotations", &ann, "--out", &d, "--seed", "1"])?;
    cli_ok(&["--jobs", jobs, "build-looktwice", "--annotations", &ann, "--out", &d, "--seed", "1"])?;
    cli_ok(&["--jobs", jobs, "build-general", "--annotations", &ann, "--out", &d, "--seed", "1"])?;
    cli_ok(&["--jobs", jobs, "build-verbal-spatial", "--annotations", &ann, "--out", &d, "--seed", "1"])?;
    Ok(())
}

fn criterion_6(fx: &Fixtures) -> Result<Outcome> {
    let t = Instant::now();
    let checks = [
        ("local", all_pass(&check_local(&fx.local, LOCAL_IOU))),
        ("looktwice", all_pass(&check_looktwice(&fx.looktwice))),
        ("general", all_pass(&check_general(&fx.general))),
        ("dv+ds", all_pass(&check_dv_ds(&fx.verbal, &fx.spatial))),
    ];
    let recounts = [
        ("local", recount_local(&fx.local, fx)),
        ("looktwice", recount_looktwice(&fx.looktwice)),
        ("general", recount_general(&fx.general)),
    ];
    let dir = tempfile::tempdir()?;
    cli_build_all(dir.path(), "1")?;
    let data = dir.path().join("data");
    let verify = run_cli(&["verify", "--data", &data.display().to_string()])?;
    let built = [("local", "local"), ("looktwice", "looktwice"), ("general", "general"), ("dv", "dv"), ("ds", "ds")]
        .iter()
        .all(|(p, _)| data.join(format!("{p}.train.jsonl")).exists());
    let failed_checks: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let failed_recounts: Vec<String> = recounts.iter().filter(|r| r.1 > 0).map(|r| format!("{} ({})", r.0, r.1)).collect();
    let pass = failed_checks.is_empty() && failed_recounts.is_empty() && verify.status.code() == Some(0) && built;
    outcome(
        pass,
        format!(
            "checkers failing: {failed_checks:?}; recount violations: {failed_recounts:?}; verify exit {:?} in {:.1?}",
            verify.status.code(),
            t.elapsed()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn jsonl_bytes(insts: &[PointQAInstance]) -> Vec<u8> {
    insts.iter().flat_map(|i| serde_json::to_vec(i).expect("serializable").into_iter().chain(*b"\n")).collect()
}

fn builder_bytes(threads: usize) -> Result<Vec<Vec<u8>>> {
    pool(threads, || -> Result<Vec<Vec<u8>>> {
        let fx = build_fixtures()?;
        let store: Vec<u8> = fx.world.store.iter().flat_map(|img| serde_json::to_vec(img).expect("serializable")).collect();
        Ok(vec![
            store,
            jsonl_bytes(&fx.local),
            jsonl_bytes(&fx.looktwice),
            jsonl_bytes(&fx.general),
            jsonl_bytes(&fx.verbal),
            jsonl_bytes(&fx.spatial),
            jsonl_bytes(&fx.count),
            jsonl_bytes(&fx.comparative),
        ])
    })
}

fn checkpoint_bytes(fx: &Fixtures, arch: Architecture, streams: Streams, threads: usize) -> Result<Vec<u8>> {
    pool(threads, || -> Result<Vec<u8>> {
        let splits = Splits::from_instances(fx.local.clone());
        let inputs = InputBuilder::new(&fx.world.store, &fx.world.features, 16, Strategy::AllContaining);
        let config = small(splits.model_config(arch, streams, fx.world.features.dim()), 16);
        let tc = TrainConfig { batch_size: 16, ..train_config(60, 100) };
        let (model, outcome) = fit(config, &inputs, &splits, &tc, |_| {})?;
        let mut bytes = checkpoint::to_bytes(&model, serde_json::json!({}));
        bytes.extend(serde_json::to_vec(&outcome.log)?);
        Ok(bytes)
    })
}

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "world-config.json") {
                out.insert(path.strip_prefix(dir)?.display().to_string(), std::fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn criterion_7(fx: &Fixtures) -> Result<Outcome> {
    let builders_same = builder_bytes(1)? == builder_bytes(3)?;
    let mut models_same = Vec::new();
    for (arch, streams) in [
        (Architecture::PythiaLocal, Streams::PointQ),
        (Architecture::PythiaGlobal, Streams::ThreeStream),
        (Architecture::Mcan, Streams::ThreeStream),
        (Architecture::Lxmert, Streams::TwoStream),
    ] {
        let same = checkpoint_bytes(fx, arch, streams, 1)? == checkpoint_bytes(fx, arch, streams, 3)?;
        models_same.push((arch.as_str(), same));
    }

    // end to end through the binary, with different worker counts
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let mut cli_same = true;
    let mut files = 0;
    for (root, jobs) in [(a.path(), "1"), (b.path(), "2")] {
        cli_build_all(root, jobs)?;
        let world = root.join("world").display().to_string();
        let out = root.join("model").display().to_string();
        cli_ok(&["--jobs", jobs, "train", "--arch", "mcan", "--data", &world, "--out", &out, "--max-iterations", "60", "--d", "16", "--heads", "2", "--layers", "1", "--seed", "4"])?;
    }
    let (fa, fb) = (dir_bytes(a.path())?, dir_bytes(b.path())?);
    for (name, bytes) in &fa {
        files += 1;
        cli_same &= fb.get(name) == Some(bytes);
    }
    cli_same &= fa.len() == fb.len() && fa.contains_key("model/model.pqck");
    let pass = builders_same && cli_same && models_same.iter().all(|m| m.1);
    outcome(pass, format!("builders identical: {builders_same}; checkpoints identical: {models_same:?}; CLI outputs identical over {files} files: {cli_same}"))
}

// ---------------------------------------------------------------- 8

const REGION_DIM: usize = 3;

fn tiny(arch: Architecture, streams: Streams) -> Result<Model> {
    let vocab = Vocabulary::build(["what color is this shirt", "how many of these are there"]);
    let mut c = ModelConfig::new(arch, streams, REGION_DIM, vocab, vec!["a".into(), "b".into(), "c".into()]);
    (c.d, c.heads, c.layers, c.n_l, c.n_img, c.n_pt, c.n_x, c.seed) = (4, 2, 1, 1, 1, 1, 1, 5);
    let mut model = Model::new(c)?;
    // move every weight off its initialization so no ReLU sits at a kink
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        model.params.value_mut(id).mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
    }
    Ok(model)
}

/// `valid` random rows then zero padding up to `n`; the indicator column
/// (last) stays zero.
fn regions(rng: &mut ChaCha8Rng, width: usize, n: usize, valid: usize) -> Regions {
    let mut rows = Mat::zeros((n, width));
    for r in 0..valid {
        for c in 0..width - 1 {
            rows[[r, c]] = rng.random_range(-1.0..1.0);
        }
    }
    let boxes = (0..n)
        .map(|i| if i < valid { BoundingBox { x: i as f64, y: 1.0, w: 4.0 + i as f64, h: 3.0 } } else { BoundingBox { x: 0.0, y: 0.0, w: 0.0, h: 0.0 } })
        .collect();
    Regions { rows, mask: Arc::from((0..n).map(|i| i < valid).collect::<Vec<_>>()), boxes }
}

fn random_sample(model: &Model, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = model.config.input_dim();
    let tokens = model.vocabulary().encode(["what color is this shirt", "how many of these are there"][seed as usize % 2]).expect("in vocabulary");
    Sample { tokens, point: Some(regions(&mut rng, width, 4, 3)), image: Some(regions(&mut rng, width, 5, 4)) }
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter scalar, and the number of scalars checked.
fn gradient_error(model: &mut Model, sample: &Sample) -> Result<(f64, usize, String)> {
    let eps = 1e-5;
    let (_, grads) = model.loss_and_gradients(sample, 1)?;
    let mut worst = (0.0, 0, String::new());
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let (rows, cols) = model.params.value(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                let analytic = grads.get(id).map_or(0.0, |g| g[[r, c]]);
                let orig = model.params.value(id)[[r, c]];
                model.params.value_mut(id)[[r, c]] = orig + eps;
                let up = model.loss_and_gradients(sample, 1)?.0;
                model.params.value_mut(id)[[r, c]] = orig - eps;
                let down = model.loss_and_gradients(sample, 1)?.0;
                model.params.value_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
                worst.1 += 1;
                if err > worst.0 {
                    worst.0 = err;
                    worst.2 = format!("{}[{r},{c}]", model.params.name(id));
                }
            }
        }
    }
    Ok(worst)
}

/// The same regions with garbage padding rows spliced in at random places.
/// Returns the new regions and where each original valid row landed.
fn with_garbage_padding(rng: &mut ChaCha8Rng, r: &Regions, extra: usize) -> (Regions, Vec<usize>) {
    let valid: Vec<usize> = (0..r.mask.len()).filter(|&i| r.mask[i]).collect();
    let total = valid.len() + extra;
    let mut slots: Vec<usize> = (0..total).collect();
    slots.shuffle(rng);
    let mut real_slots: Vec<usize> = slots[..valid.len()].to_vec();
    real_slots.sort();
    let width = r.rows.ncols();
    let mut rows = Mat::from_shape_fn((total, width), |_| rng.random_range(-50.0..50.0));
    let mut mask = vec![false; total];
    let mut boxes = vec![BoundingBox { x: 3.0, y: 3.0, w: 9.0, h: 9.0 }; total];
    for (&src, &dst) in valid.iter().zip(&real_slots) {
        rows.row_mut(dst).assign(&r.rows.row(src));
        mask[dst] = true;
        boxes[dst] = r.boxes[src];
    }
    (Regions { rows, mask: Arc::from(mask), boxes }, real_slots)
}

fn permuted(rng: &mut ChaCha8Rng, r: &Regions) -> (Regions, Vec<usize>) {
    let n = r.mask.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    // row k of the result is row order[k] of the input
    let mut rows = r.rows.clone();
    for (k, &src) in order.iter().enumerate() {
        rows.row_mut(k).assign(&r.rows.row(src));
    }
    let mask: Vec<bool> = order.iter().map(|&s| r.mask[s]).collect();
    let boxes = order.iter().map(|&s| r.boxes[s]).collect();
    let mut position = vec![0; n];
    for (k, &src) in order.iter().enumerate() {
        position[src] = k;
    }
    (Regions { rows, mask: Arc::from(mask), boxes }, position)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation under padding and permutation, plus the largest
/// normalization error, for one model.
fn invariance(model: &Model) -> Result<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut pad, mut perm, mut norm) = (0.0f64, 0.0f64, 0.0f64);
    let local_of = |s: &Sample| if model.needs_point() { s.point.clone() } else { s.image.clone() };
    for seed in 0..10 {
        let base = random_sample(model, seed);
        let (dist, att) = model.predict(&base)?;
        norm = norm.max((dist.probs.iter().sum::<f64>() - 1.0).abs());
        norm = norm.max(dist.probs.iter().map(|p| -p.min(0.0)).fold(0.0, f64::max));
        for w in [Some(&att.local), att.global.as_ref()].into_iter().flatten().filter(|w| !w.is_empty()) {
            norm = norm.max((w.iter().sum::<f64>() - 1.0).abs());
        }
        let local = local_of(&base);

        // garbage padding
        let (point, point_pos) = with_garbage_padding(&mut rng, base.point.as_ref().expect("point"), 3);
        let (image, image_pos) = with_garbage_padding(&mut rng, base.image.as_ref().expect("image"), 2);
        let padded = Sample { tokens: base.tokens.clone(), point: Some(point), image: Some(image) };
        let (d2, a2) = model.predict(&padded)?;
        pad = pad.max(max_diff(&dist.probs, &d2.probs));
        let positions = if model.needs_point() { &point_pos } else { &image_pos };
        if !att.local.is_empty() {
            let moved: Vec<f64> = positions.iter().map(|&p| a2.local[p]).collect();
            let valid: Vec<f64> = (0..att.local.len()).filter(|&i| local.as_ref().is_some_and(|l| l.mask[i])).map(|i| att.local[i]).collect();
            pad = pad.max(max_diff(&valid, &moved));
            let padding_mass: f64 = (0..a2.local.len()).filter(|i| !positions.contains(i)).map(|i| a2.local[i].abs()).sum();
            pad = pad.max(padding_mass);
        }

        // permutation of every stream
        let (point, point_at) = permuted(&mut rng, base.point.as_ref().expect("point"));
        let (image, image_at) = permuted(&mut rng, base.image.as_ref().expect("image"));
        let shuffled = Sample { tokens: base.tokens.clone(), point: Some(point), image: Some(image) };
        let (d3, a3) = model.predict(&shuffled)?;
        perm = perm.max(max_diff(&dist.probs, &d3.probs));
        let at = if model.needs_point() { &point_at } else { &image_at };
        if !att.local.is_empty() {
            let moved: Vec<f64> = (0..att.local.len()).map(|i| a3.local[at[i]]).collect();
            perm = perm.max(max_diff(&att.local, &moved));
        }
        if let (Some(g), Some(g3)) = (&att.global, &a3.global) {
            let moved: Vec<f64> = (0..g.len()).map(|i| g3[image_at[i]]).collect();
            perm = perm.max(max_diff(g, &moved));
        }
    }
    Ok((pad, perm, norm))
}

fn criterion_8() -> Result<Outcome> {
    let (mut grad, mut pad, mut perm, mut norm) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut worst_at = String::new();
    let mut models = Vec::new();
    let mut scalars = 0;
    let mut archs = BTreeSet::new();
    for arch in [Architecture::PythiaLocal, Architecture::PythiaGlobal, Architecture::Mcan, Architecture::Lxmert] {
        for streams in Streams::ALL {
            let Ok(mut model) = tiny(arch, streams) else { continue };
            archs.insert(arch.as_str());
            let sample = random_sample(&model, 3);
            let (g, n, at) = gradient_error(&mut model, &sample)?;
            scalars += n;
            if g > grad {
                grad = g;
                worst_at = format!("{arch}/{streams} {at}");
            }
            let (p, q, r) = invariance(&model)?;
            (pad, perm, norm) = (pad.max(p), perm.max(q), norm.max(r));
            models.push(format!("{arch}/{streams}"));
        }
    }
    let pass = archs.len() == 4 && grad <= 1e-4 && pad <= 1e-6 && perm <= 1e-6 && norm <= 1e-6;
    outcome(
        pass,
        format!(
            "{} configs, {scalars} scalars: worst gradient rel error {grad:.2e} ({worst_at}); padding {pad:.1e}; permutation {perm:.1e}; normalization {norm:.1e}",
            models.len()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Result<Outcome> {
    let cfg = SynthWorldConfig {
        num_images: 600,
        classes: vec!["person".into(), "car".into()],
        actions: ["standing", "sitting", "running", "walking"].map(String::from).to_vec(),
        action_class: Some("person".into()),
        part: Some(PartSpec { holder: "person".into(), part: "shirt".into() }),
        feature_dim: 20,
        ..SynthWorldConfig::default()
    };
    let world = generate_world(&cfg).map_err(anyhow::Error::msg)?;
    let local = world.task_instances(SynthTask::Local)?;
    let train_images: BTreeSet<String> = local.iter().filter(|i| i.split == Split::Train).map(|i| i.image_id.clone()).collect();
    let splits = Splits::from_instances(local);
    let inputs = InputBuilder::new(&world.store, &world.features, 16, Strategy::AllContaining);
    let mut config = splits.model_config(Architecture::PythiaLocal, Streams::PointQ, world.features.dim());
    config.d = 32;
    let (fitted, t) = timed(|| fit(config, &inputs, &splits, &train_config(800, 500), |_| {}));
    let (model, trained) = fitted?;
    let pairs: Vec<_> = world.attention_swap_pairs().into_iter().filter(|(p, _)| !train_images.contains(&p.image_id)).collect();
    let a = attention_swap(&ModelPredictor { model: &model, inputs }, &pairs)?;
    let pass = a.pairs >= 200 && a.p_value < 0.05 && a.median_area_after > a.median_area_before;
    outcome(
        pass,
        format!(
            "{} held-out pairs (val {:.3}, {t:.0?}): median area {:.0} -> {:.0}, {} up / {} down / {} tied, p = {:.2e}",
            a.pairs, trained.best_val_accuracy, a.median_area_before, a.median_area_after, a.increases, a.decreases, a.ties, a.p_value
        ),
    )
}

fn main() {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let fixtures = if [1, 5, 6, 7].into_iter().any(run) { Some(build_fixtures()) } else { None };
    let fx = || -> Result<&Fixtures> {
        match fixtures.as_ref().expect("fixtures built") {
            Ok(f) => Ok(f),
            Err(e) => Err(anyhow::anyhow!("fixture build failed: {e:#}")),
        }
    };
    let criteria: [(u32, &str, Box<dyn Fn() -> Result<Outcome> + '_>); 9] = [
        (1, "paired-eval exactness", Box::new(|| criterion_1(fx()?))),
        (2, "synthetic Local separation", Box::new(criterion_2)),
        (3, "local-vs-global separation", Box::new(criterion_3)),
        (4, "three-stream context benefit", Box::new(criterion_4)),
        (5, "oracle equivalences", Box::new(|| criterion_5(fx()?))),
        (6, "dataset constraint suite", Box::new(|| criterion_6(fx()?))),
        (7, "determinism", Box::new(|| criterion_7(fx()?))),
        (8, "numerical suite", Box::new(criterion_8)),
        (9, "attention-shift property", Box::new(criterion_9)),
    ];
    let mut failures = 0;
    for (n, name, check) in &criteria {
        if !run(*n) {
            continue;
        }
        let started = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failures += usize::from(!pass);
        println!("criterion {n} {} {name}: {detail} [{:.0?}]", if pass { "PASS" } else { "FAIL" }, started.elapsed());
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
