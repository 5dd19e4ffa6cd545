//! Paired verbal-disambiguation and spatial-disambiguation datasets.
//!
//! A question such as "What color is the car on the left?" disambiguates its
//! subject with a prepositional phrase. The verbal set keeps it verbatim; the
//! spatial set drops the phrase and supplies a point on the matched object.

use std::collections::BTreeSet;

use rayon::prelude::*;

use super::{BuildError, BuildReport};
use crate::dataset::{assign_splits, validate_fractions, InstanceMeta, PointQAInstance, Split, Task, THREE_WAY_SPLITS};
use crate::geometry::center_point;
use crate::store::{AnnotationStore, ImageAnnotation, ObjectAnnotation};
use crate::text::singularize;

const WH_WORDS: &[&str] = &["what", "which", "who", "whose", "where", "how", "why", "when"];
const DETERMINERS: &[&str] = &["the", "a", "an"];
/// Longest phrases first so "in front of" wins over "in".
const PREPOSITIONS: &[&[&str]] = &[
    &["to", "the", "left", "of"],
    &["to", "the", "right", "of"],
    &["in", "front", "of"],
    &["next", "to"],
    &["on"],
    &["in"],
    &["at"],
    &["near"],
    &["behind"],
    &["under"],
    &["above"],
    &["by"],
    &["with"],
];
const VERBS: &[&str] = &[
    "is", "are", "was", "were", "be", "being", "been", "do", "does", "did", "has", "have", "had", "can", "could",
    "will", "would", "should",
];

fn is_verbish(t: &str) -> bool {
    VERBS.contains(&t) || (t.len() > 4 && t.ends_with("ing"))
}

fn preposition_at(lower: &[String], i: usize) -> Option<usize> {
    PREPOSITIONS
        .iter()
        .find(|p| lower.len() >= i + p.len() && p.iter().zip(&lower[i..]).all(|(a, b)| *a == b))
        .map(|p| p.len())
}

/// Token span `[start, end)` of the prepositional phrase and the subject.
fn locate(question: &str) -> Option<(Vec<&str>, String, usize, usize)> {
    let body = question.trim().trim_end_matches('?').trim_end();
    let words: Vec<&str> = body.split_whitespace().collect();
    let lower: Vec<String> = words.iter().map(|w| w.trim_matches(',').to_lowercase()).collect();
    if lower.is_empty() || !WH_WORDS.contains(&lower[0].as_str()) {
        return None;
    }
    let det = (1..lower.len()).find(|&i| DETERMINERS.contains(&lower[i].as_str()))?;
    let mut p = det + 1;
    while p < lower.len() && preposition_at(&lower, p).is_none() {
        if is_verbish(&lower[p]) {
            return None;
        }
        p += 1;
    }
    // A participle head ("the car parked on ...") means the phrase attaches to a verb.
    let head = &lower[p.checked_sub(1)?];
    if p == det + 1 || p >= lower.len() || (head.len() > 4 && head.ends_with("ed")) {
        return None;
    }
    let prep_len = preposition_at(&lower, p)?;
    let mut end = p + prep_len;
    if end < lower.len() && DETERMINERS.contains(&lower[end].as_str()) {
        end += 1;
    }
    let object_start = end;
    while end < lower.len() && !is_verbish(&lower[end]) && !WH_WORDS.contains(&lower[end].as_str()) {
        end += 1;
    }
    if end == object_start {
        return None;
    }
    let subject = singularize(&lower[p - 1]);
    Some((words, subject, p, end))
}

/// Subject of the question and the prepositional phrase that follows it.
pub fn detect_verbal_disambiguation(question: &str) -> Option<(String, String)> {
    let (words, subject, start, end) = locate(question)?;
    Some((subject, words[start..end].join(" ")))
}

/// The question with its prepositional phrase removed.
pub fn strip_disambiguation(question: &str) -> Option<String> {
    let (words, _, start, end) = locate(question)?;
    let kept: Vec<&str> = words[..start].iter().chain(&words[end..]).copied().collect();
    Some(format!("{}?", kept.join(" ")))
}

#[derive(Debug, Clone)]
pub struct VerbalSpatialConfig {
    pub split_fractions: Vec<(Split, f64)>,
    pub seed: u64,
}

impl VerbalSpatialConfig {
    pub fn new(seed: u64) -> Self {
        Self { split_fractions: THREE_WAY_SPLITS.to_vec(), seed }
    }
}

/// Best-matching object: most attribute words shared with the phrase, then
/// largest box, then annotation order.
fn match_object<'a>(candidates: &[&'a ObjectAnnotation], phrase: &str) -> &'a ObjectAnnotation {
    let words: BTreeSet<String> = phrase.split_whitespace().map(|w| w.to_lowercase()).collect();
    let score = |o: &ObjectAnnotation| o.attributes.iter().filter(|a| words.contains(a.as_str())).count();
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        let better = (score(c), c.bbox.area()) > (score(best), best.bbox.area());
        if better {
            best = c;
        }
    }
    best
}

#[derive(Default)]
struct ImageOutput {
    verbal: Vec<PointQAInstance>,
    spatial: Vec<PointQAInstance>,
    undetected: usize,
    not_found: usize,
    not_repeated: usize,
}

fn build_image(img: &ImageAnnotation) -> ImageOutput {
    let mut out = ImageOutput::default();
    for qa in img.source_qas.iter().filter(|q| q.answer_boxes.is_none()) {
        let Some((subject, phrase)) = detect_verbal_disambiguation(&qa.question) else {
            out.undetected += 1;
            continue;
        };
        let candidates: Vec<&ObjectAnnotation> = img.objects.iter().filter(|o| o.class_name() == subject).collect();
        match candidates.len() {
            0 => {
                out.not_found += 1;
                continue;
            }
            1 => {
                out.not_repeated += 1;
                continue;
            }
            _ => {}
        }
        let object = match_object(&candidates, &phrase);
        let mut meta = InstanceMeta::new(Task::Verbal);
        meta.object_class = Some(subject.clone());
        meta.object_id = Some(object.object_id.clone());
        meta.source_qa_id = Some(qa.qa_id.clone());
        out.verbal.push(PointQAInstance {
            qa_id: qa.qa_id.clone(),
            image_id: img.image_id.clone(),
            question: qa.question.clone(),
            point: None,
            gt_box: None,
            answer: qa.answer.clone(),
            split: Split::Train,
            meta: meta.clone(),
        });
        meta.task = Task::Spatial;
        out.spatial.push(PointQAInstance {
            qa_id: qa.qa_id.clone(),
            image_id: img.image_id.clone(),
            question: strip_disambiguation(&qa.question).expect("detected above"),
            point: Some(center_point(&object.bbox).expect("validated on load")),
            gt_box: Some(object.bbox),
            answer: qa.answer.clone(),
            split: Split::Train,
            meta,
        });
    }
    out
}

/// Returns `(verbal, spatial, report)`; the two lists are index-aligned.
pub fn build_dv_ds(
    store: &AnnotationStore,
    config: &VerbalSpatialConfig,
) -> Result<(Vec<PointQAInstance>, Vec<PointQAInstance>, BuildReport), BuildError> {
    validate_fractions(&config.split_fractions)?;
    let images: Vec<&ImageAnnotation> = store.iter().collect();
    let outputs: Vec<ImageOutput> = images.par_iter().map(|img| build_image(img)).collect();
    let used: Vec<String> = images
        .iter()
        .zip(&outputs)
        .filter(|(_, o)| !o.verbal.is_empty())
        .map(|(img, _)| img.image_id.clone())
        .collect();
    let splits = assign_splits(&used, &config.split_fractions, config.seed)?;
    let mut report = BuildReport::new("verbal_spatial", config.seed, images.len());
    let (mut verbal, mut spatial) = (Vec::new(), Vec::new());
    for out in outputs {
        report.skip("no_verbal_disambiguation", out.undetected);
        report.skip("subject_not_found", out.not_found);
        report.skip("subject_not_repeated", out.not_repeated);
        for (mut v, mut s) in out.verbal.into_iter().zip(out.spatial) {
            v.split = splits[&v.image_id];
            s.split = v.split;
            verbal.push(v);
            spatial.push(s);
        }
    }
    report.tally(&spatial);
    Ok((verbal, spatial, report))
}
