//! Counting questions whose object reference comes only from the point.
//!
//! Each human counting question is matched to an annotated region and
//! rewritten at three levels of verbal specificity that share one point and
//! one binned answer. Evaluation images must hold two questions about
//! different classes with different answers; training questions get a
//! synthesized counterpart with a different class and answer.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{image_rng, BuildError, BuildReport};
use crate::dataset::{split_counts, InstanceMeta, PointQAInstance, QuestionForm, Split, Task};
use crate::geometry::{center_point, iou, Point};
use crate::store::{AnnotationStore, ImageAnnotation, ObjectAnnotation, StoreError};
use crate::text::{normalize, pluralize, singularize, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supercategory {
    Beings,
    Vehicles,
    Objects,
}

impl Supercategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            Supercategory::Beings => "beings",
            Supercategory::Vehicles => "vehicles",
            Supercategory::Objects => "objects",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SupercategoryMap {
    pub super_of: BTreeMap<String, Supercategory>,
}

impl SupercategoryMap {
    pub fn get(&self, class: &str) -> Option<Supercategory> {
        self.super_of.get(class).copied()
    }

    pub fn load(path: &std::path::Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
        let raw: BTreeMap<String, Supercategory> = serde_json::from_str(&text)
            .map_err(|e| StoreError::BadMap { path: path.display().to_string(), message: e.to_string() })?;
        Ok(Self { super_of: raw.into_iter().map(|(k, v)| (normalize(&k), v)).collect() })
    }

    /// The map shipped with the crate (`data/supercategories.json`).
    pub fn bundled() -> Self {
        serde_json::from_str(include_str!("../../data/supercategories.json")).expect("bundled map parses")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CountAnswer {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = ">2")]
    MoreThanTwo,
}

impl CountAnswer {
    pub const ALL: [CountAnswer; 3] = [CountAnswer::One, CountAnswer::Two, CountAnswer::MoreThanTwo];

    pub fn label(&self) -> &'static str {
        match self {
            CountAnswer::One => "1",
            CountAnswer::Two => "2",
            CountAnswer::MoreThanTwo => ">2",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CountError {
    #[error("count must be at least 1, got {0}")]
    NonPositive(usize),
    #[error("class {0:?} has no supercategory")]
    UnmappedClass(String),
}

pub fn bin_count_answer(n: usize) -> Result<CountAnswer, CountError> {
    match n {
        0 => Err(CountError::NonPositive(0)),
        1 => Ok(CountAnswer::One),
        2 => Ok(CountAnswer::Two),
        _ => Ok(CountAnswer::MoreThanTwo),
    }
}

const NP_STOP: &[&str] = &[
    "are", "is", "were", "was", "can", "could", "do", "does", "did", "have", "has", "will", "would", "there", "in",
    "on", "at", "of", "near", "by", "with", "under", "above", "behind", "from", "for", "to", "inside", "visible",
    "shown", "pictured", "seen",
];

/// Subject class of a "How many {NP} ...?" question, singularized.
pub fn extract_count_subject(question: &str) -> Option<String> {
    let tokens = tokenize(question);
    if tokens.len() < 3 || tokens[0] != "how" || tokens[1] != "many" {
        return None;
    }
    let np: Vec<&str> =
        tokens[2..].iter().map(String::as_str).take_while(|t| !NP_STOP.contains(t)).collect();
    if np.is_empty() {
        return None;
    }
    Some(singularize(&np.join(" ")))
}

/// Uniform seeded choice among objects whose canonical name is `subject`.
pub fn match_subject_to_region<'a>(
    subject: &str,
    img: &'a ImageAnnotation,
    rng: &mut ChaCha8Rng,
) -> Option<&'a ObjectAnnotation> {
    let candidates: Vec<&ObjectAnnotation> = img.objects.iter().filter(|o| o.class_name() == subject).collect();
    if candidates.is_empty() {
        return None;
    }
    Some(candidates[rng.random_range(0..candidates.len())])
}

/// Supercategory and generic rewrites of a counting question.
pub fn generalize_question(object_class: &str, super_map: &SupercategoryMap) -> Result<(String, String), CountError> {
    let sup = super_map.get(object_class).ok_or_else(|| CountError::UnmappedClass(object_class.into()))?;
    Ok((format!("How many of these {} are there?", sup.as_str()), "How many of these are there?".to_string()))
}

/// Same-class objects after greedy duplicate suppression in descending area.
pub fn count_instances(img: &ImageAnnotation, object_class: &str, dedup_iou: f64) -> usize {
    let mut boxes: Vec<_> = img.objects.iter().filter(|o| o.class_name() == object_class).map(|o| o.bbox).collect();
    boxes.sort_by(|a, b| b.area().total_cmp(&a.area()));
    let mut kept: Vec<crate::geometry::BoundingBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| iou(k, &b).map(|v| v < dedup_iou).unwrap_or(true)) {
            kept.push(b);
        }
    }
    kept.len()
}

fn parse_count(answer: &str) -> Option<usize> {
    const WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];
    let a = answer.trim().trim_end_matches('.').to_lowercase();
    a.parse().ok().or_else(|| WORDS.iter().position(|w| *w == a))
}

#[derive(Debug, Clone)]
pub struct LookTwiceConfig {
    pub super_map: Option<SupercategoryMap>,
    pub min_class_frequency: usize,
    pub dedup_iou: f64,
    /// Fractions of constraint-satisfying images sent to val and test.
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl LookTwiceConfig {
    pub fn new(super_map: SupercategoryMap, seed: u64) -> Self {
        Self {
            super_map: Some(super_map),
            min_class_frequency: 100,
            dedup_iou: 0.5,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    qa_id: String,
    question: String,
    class: String,
    point: Point,
    answer: CountAnswer,
}

#[derive(Default)]
struct ImageCandidates {
    candidates: Vec<Candidate>,
    not_counting: usize,
    no_region: usize,
    bad_answer: usize,
}

fn collect_candidates(img: &ImageAnnotation, rng: &mut ChaCha8Rng) -> ImageCandidates {
    let mut out = ImageCandidates::default();
    for qa in img.source_qas.iter().filter(|q| q.answer_boxes.is_none()) {
        let Some(subject) = extract_count_subject(&qa.question) else {
            out.not_counting += 1;
            continue;
        };
        let Some(object) = match_subject_to_region(&subject, img, rng) else {
            out.no_region += 1;
            continue;
        };
        let Some(answer) = parse_count(&qa.answer).and_then(|n| bin_count_answer(n).ok()) else {
            out.bad_answer += 1;
            continue;
        };
        out.candidates.push(Candidate {
            qa_id: qa.qa_id.clone(),
            question: qa.question.clone(),
            class: subject,
            point: center_point(&object.bbox).expect("validated on load"),
            answer,
        });
    }
    out
}

/// True when two candidates differ in both class and answer.
fn satisfies_constraint(cands: &[Candidate]) -> bool {
    cands
        .iter()
        .enumerate()
        .any(|(i, a)| cands[i + 1..].iter().any(|b| a.class != b.class && a.answer != b.answer))
}

fn emit_forms(
    img: &ImageAnnotation,
    cand: &Candidate,
    super_map: &SupercategoryMap,
    split: Split,
    synthesized: bool,
    next_id: &mut usize,
    out: &mut Vec<PointQAInstance>,
) {
    let sup = super_map.get(&cand.class).expect("candidate classes are mapped");
    let (super_form, generic_form) = generalize_question(&cand.class, super_map).expect("candidate classes are mapped");
    let forms = [
        (QuestionForm::Object, cand.question.clone()),
        (QuestionForm::Supercategory, super_form),
        (QuestionForm::Generic, generic_form),
    ];
    for (form, question) in forms {
        let mut meta = InstanceMeta::new(Task::Looktwice);
        meta.object_class = Some(cand.class.clone());
        meta.supercategory = Some(sup.as_str().into());
        meta.question_form = Some(form);
        meta.synthesized = Some(synthesized);
        meta.source_qa_id = Some(cand.qa_id.clone());
        out.push(PointQAInstance {
            qa_id: format!("lt-{}-{}", img.image_id, next_id),
            image_id: img.image_id.clone(),
            question,
            point: Some(cand.point),
            gt_box: None,
            answer: cand.answer.label().into(),
            split,
            meta,
        });
        *next_id += 1;
    }
}

/// Picks a counterpart class with a different binned count, uniformly among
/// the classes present in the image that have a supercategory.
fn synthesize_counterpart(
    img: &ImageAnnotation,
    source: &Candidate,
    super_map: &SupercategoryMap,
    dedup_iou: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Candidate> {
    let classes: BTreeSet<&str> = img.objects.iter().map(|o| o.class_name()).collect();
    let options: Vec<(&str, CountAnswer)> = classes
        .into_iter()
        .filter(|c| *c != source.class && super_map.get(c).is_some())
        .filter_map(|c| {
            let bin = bin_count_answer(count_instances(img, c, dedup_iou)).ok()?;
            (bin != source.answer).then_some((c, bin))
        })
        .collect();
    let &(class, answer) = options.choose(rng)?;
    let objects: Vec<&ObjectAnnotation> = img.objects.iter().filter(|o| o.class_name() == class).collect();
    let object = objects[rng.random_range(0..objects.len())];
    let cand = Candidate {
        qa_id: format!("{}-syn", source.qa_id),
        question: format!("How many {} are there?", pluralize(class)),
        class: class.to_string(),
        point: center_point(&object.bbox).expect("validated on load"),
        answer,
    };
    Some(cand)
}

pub fn build_looktwice_dataset(
    store: &AnnotationStore,
    config: &LookTwiceConfig,
) -> Result<(Vec<PointQAInstance>, BuildReport), BuildError> {
    let super_map =
        config.super_map.as_ref().ok_or_else(|| BuildError::Config("supercategory map is required".into()))?;
    if config.val_fraction < 0.0 || config.test_fraction < 0.0 || config.val_fraction + config.test_fraction > 1.0 {
        return Err(BuildError::Config("val/test fractions must be non-negative and sum to at most 1".into()));
    }
    let images: Vec<&ImageAnnotation> = store.iter().collect();
    let mut report = BuildReport::new("looktwice", config.seed, images.len());

    let mut per_image: Vec<ImageCandidates> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| collect_candidates(img, &mut image_rng(config.seed, i)))
        .collect();
    for c in &per_image {
        report.skip("not_counting_question", c.not_counting);
        report.skip("no_matching_region", c.no_region);
        report.skip("unparsable_answer", c.bad_answer);
    }

    let mut class_freq: HashMap<String, usize> = HashMap::new();
    for c in per_image.iter().flat_map(|p| &p.candidates) {
        *class_freq.entry(c.class.clone()).or_default() += 1;
    }
    for p in &mut per_image {
        let before = p.candidates.len();
        p.candidates.retain(|c| class_freq[&c.class] >= config.min_class_frequency);
        report.skip("rare_class", before - p.candidates.len());
        let before = p.candidates.len();
        p.candidates.retain(|c| super_map.get(&c.class).is_some());
        report.skip("unmapped_class", before - p.candidates.len());
    }

    let mut eligible: Vec<&str> = images
        .iter()
        .zip(&per_image)
        .filter(|(_, p)| satisfies_constraint(&p.candidates))
        .map(|(img, _)| img.image_id.as_str())
        .collect();
    let mut split_rng = image_rng(config.seed, usize::MAX - 1);
    eligible.shuffle(&mut split_rng);
    let fractions = [
        (Split::Val, config.val_fraction),
        (Split::Test, config.test_fraction),
        (Split::Train, 1.0 - config.val_fraction - config.test_fraction),
    ];
    let counts = split_counts(eligible.len(), &fractions);
    let mut split_of: HashMap<&str, Split> = HashMap::new();
    let mut it = eligible.into_iter();
    for ((split, _), n) in fractions.iter().zip(counts) {
        for id in it.by_ref().take(n) {
            split_of.insert(id, *split);
        }
    }

    let emitted: Vec<(Vec<PointQAInstance>, usize)> = images
        .par_iter()
        .zip(&per_image)
        .enumerate()
        .map(|(i, (img, p))| {
            let split = split_of.get(img.image_id.as_str()).copied().unwrap_or(Split::Train);
            let mut rng = image_rng(config.seed ^ 0x5eed_c0de, i);
            let mut out = Vec::new();
            let mut next_id = 0;
            let mut unsynthesized = 0;
            for cand in &p.candidates {
                emit_forms(img, cand, super_map, split, false, &mut next_id, &mut out);
                if split == Split::Train {
                    match synthesize_counterpart(img, cand, super_map, config.dedup_iou, &mut rng) {
                        Some(syn) => emit_forms(img, &syn, super_map, split, true, &mut next_id, &mut out),
                        None => unsynthesized += 1,
                    }
                }
            }
            (out, unsynthesized)
        })
        .collect();

    let mut instances = Vec::new();
    for (out, unsynthesized) in emitted {
        report.skip("train_without_counterpart", unsynthesized);
        instances.extend(out);
    }
    for inst in &instances {
        let key = if inst.meta.synthesized == Some(true) { "synthesized" } else { "human" };
        *report.breakdown.entry(key.into()).or_default() += 1;
    }
    report.tally(&instances);
    Ok((instances, report))
}
