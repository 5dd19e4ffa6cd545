//! Yes/no pointing questions from multiple-choice "which" questions.
//!
//! "Which X is Y?" becomes "Is this X Y?" (likewise for are/has/have). Each
//! transformable question yields a "yes" instance pointing at the correct
//! box and a "no" instance pointing at one randomly chosen incorrect box.

use rand::Rng;
use rayon::prelude::*;

use super::{image_rng, BuildError, BuildReport};
use crate::dataset::{assign_splits, validate_fractions, InstanceMeta, PointQAInstance, Split, Task, THREE_WAY_SPLITS};
use crate::geometry::center_point;
use crate::store::{AnnotationStore, ImageAnnotation};
use crate::text::capitalize_first;

/// Rewrites a which-question as a pointing question, or `None` when no
/// template applies. The earliest is/are/has/have after a non-empty subject
/// anchors the template.
pub fn transform_which_question(question: &str) -> Option<String> {
    let body = question.trim().trim_end_matches('?').trim_end();
    let tokens: Vec<&str> = body.split_whitespace().collect();
    if tokens.len() < 4 || !tokens[0].eq_ignore_ascii_case("which") {
        return None;
    }
    let (k, verb) = tokens
        .iter()
        .enumerate()
        .skip(2)
        .map(|(k, t)| (k, t.to_lowercase()))
        .find(|(_, t)| matches!(t.as_str(), "is" | "are" | "has" | "have"))?;
    let subject = tokens[1..k].join(" ");
    let rest = tokens[k + 1..].join(" ");
    if rest.is_empty() {
        return None;
    }
    let out = match verb.as_str() {
        "is" => format!("is this {subject} {rest}?"),
        "are" => format!("are these {subject} {rest}?"),
        "has" => format!("does this {subject} have {rest}?"),
        _ => format!("do these {subject} have {rest}?"),
    };
    Some(capitalize_first(&out))
}

#[derive(Debug, Clone)]
pub struct GeneralConfig {
    pub split_fractions: Vec<(Split, f64)>,
    pub seed: u64,
}

impl GeneralConfig {
    pub fn new(seed: u64) -> Self {
        Self { split_fractions: THREE_WAY_SPLITS.to_vec(), seed }
    }
}

#[derive(Default)]
struct ImageOutput {
    instances: Vec<PointQAInstance>,
    malformed: usize,
    not_transformable: usize,
    unusable_points: usize,
}

fn build_image(img: &ImageAnnotation, index: usize, seed: u64) -> ImageOutput {
    let mut rng = image_rng(seed, index);
    let mut out = ImageOutput::default();
    for qa in img.source_qas.iter().filter(|q| q.answer_boxes.is_some()) {
        let Some(correct) = qa.correct_index() else {
            out.malformed += 1;
            continue;
        };
        let Some(question) = transform_which_question(&qa.question) else {
            out.not_transformable += 1;
            continue;
        };
        let boxes = qa.answer_boxes.as_ref().expect("filtered above");
        let wrong: Vec<usize> = (0..boxes.len()).filter(|&i| i != correct).collect();
        let distractor = wrong[rng.random_range(0..wrong.len())];
        let yes = center_point(&boxes[correct].bbox).expect("validated on load");
        let no = center_point(&boxes[distractor].bbox).expect("validated on load");
        if yes == no || !yes.within(img.width, img.height) || !no.within(img.width, img.height) {
            out.unusable_points += 1;
            continue;
        }
        for (idx, point, answer) in [(correct, yes, "yes"), (distractor, no, "no")] {
            let mut meta = InstanceMeta::new(Task::General);
            meta.source_qa_id = Some(qa.qa_id.clone());
            meta.answer_set = Some(vec!["no".into(), "yes".into()]);
            out.instances.push(PointQAInstance {
                qa_id: format!("{}-{answer}", qa.qa_id),
                image_id: img.image_id.clone(),
                question: question.clone(),
                point: Some(point),
                gt_box: Some(boxes[idx].bbox),
                answer: answer.into(),
                split: Split::Train,
                meta,
            });
        }
    }
    out
}

pub fn build_general_dataset(
    store: &AnnotationStore,
    config: &GeneralConfig,
) -> Result<(Vec<PointQAInstance>, BuildReport), BuildError> {
    validate_fractions(&config.split_fractions)?;
    let images: Vec<&ImageAnnotation> = store.iter().collect();
    let outputs: Vec<ImageOutput> =
        images.par_iter().enumerate().map(|(i, img)| build_image(img, i, config.seed)).collect();
    let used: Vec<String> = images
        .iter()
        .zip(&outputs)
        .filter(|(_, o)| !o.instances.is_empty())
        .map(|(img, _)| img.image_id.clone())
        .collect();
    let splits = assign_splits(&used, &config.split_fractions, config.seed)?;
    let mut report = BuildReport::new("general", config.seed, images.len());
    let mut instances = Vec::new();
    for out in outputs {
        report.skip("malformed_answer_boxes", out.malformed);
        report.skip("not_transformable", out.not_transformable);
        report.skip("unusable_points", out.unusable_points);
        for mut inst in out.instances {
            inst.split = splits[&inst.image_id];
            *report.breakdown.entry(inst.answer.clone()).or_default() += 1;
            instances.push(inst);
        }
    }
    report.tally(&instances);
    Ok((instances, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{image, store, which_qa};

    #[test]
    fn templates() {
        assert_eq!(
            transform_which_question("Which pillow is closest to the window?").as_deref(),
            Some("Is this pillow closest to the window?")
        );
        assert_eq!(transform_which_question("Which men are wearing hats?").as_deref(), Some("Are these men wearing hats?"));
        assert_eq!(
            transform_which_question("Which dog has a red collar?").as_deref(),
            Some("Does this dog have a red collar?")
        );
        assert_eq!(
            transform_which_question("Which trees have no leaves?").as_deref(),
            Some("Do these trees have no leaves?")
        );
        assert_eq!(
            transform_which_question("Which way is the arrow pointing?").as_deref(),
            Some("Is this way the arrow pointing?")
        );
        assert_eq!(transform_which_question("Which of them won?"), None);
        assert_eq!(transform_which_question("What color is the car?"), None);
        assert_eq!(transform_which_question("Which car is?"), None);
    }

    #[test]
    fn earliest_verb_anchors() {
        assert_eq!(
            transform_which_question("Which glass is full and is on the table?").as_deref(),
            Some("Is this glass full and is on the table?")
        );
        assert_eq!(
            transform_which_question("Which big Red car is parked?").as_deref(),
            Some("Is this big Red car parked?")
        );
    }

    fn boxes() -> [(i32, i32, i32, i32); 4] {
        [(0, 0, 10, 10), (20, 0, 10, 10), (40, 0, 10, 10), (60, 0, 10, 10)]
    }

    #[test]
    fn pairs_yes_and_no() {
        let img = image("i", vec![], vec![which_qa("q", "Which pillow is closest to the window?", boxes(), 0)]);
        let (inst, _) = build_general_dataset(&store(vec![img]), &GeneralConfig::new(9)).unwrap();
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[0].answer, "yes");
        assert_eq!(inst[0].point, Some(crate::geometry::Point::new(5, 5)));
        assert_eq!(inst[1].answer, "no");
        assert_ne!(inst[1].point, inst[0].point);
        assert_eq!(inst[0].split, inst[1].split);
    }

    #[test]
    fn balanced_over_fixture() {
        let images: Vec<_> = (0..10)
            .map(|i| {
                image(
                    &format!("img{i}"),
                    vec![],
                    vec![
                        which_qa(&format!("q{i}"), "Which cup is empty?", boxes(), i % 4),
                        which_qa(&format!("w{i}"), "Which of them won?", boxes(), 0),
                    ],
                )
            })
            .collect();
        let (inst, report) = build_general_dataset(&store(images), &GeneralConfig::new(3)).unwrap();
        assert_eq!(inst.len(), 20);
        assert_eq!(inst.iter().filter(|i| i.answer == "yes").count(), 10);
        assert_eq!(report.skipped["not_transformable"], 10);
    }

    #[test]
    fn malformed_boxes_skipped() {
        let mut bad = which_qa("q", "Which cup is empty?", boxes(), 0);
        bad.answer_boxes.as_mut().unwrap().pop();
        let img = image("i", vec![], vec![bad]);
        let (inst, report) = build_general_dataset(&store(vec![img]), &GeneralConfig::new(3)).unwrap();
        assert!(inst.is_empty());
        assert_eq!(report.skipped["malformed_answer_boxes"], 1);
    }
}
