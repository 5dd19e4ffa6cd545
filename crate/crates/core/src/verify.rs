//! Constraint checkers for built datasets. Each recomputes a builder
//! guarantee from the emitted instances alone.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::builders::CheckResult;
use crate::dataset::{PointQAInstance, QuestionForm, Split};
use crate::geometry::{contains, iou};

fn split_per_image(instances: &[PointQAInstance]) -> CheckResult {
    let mut check = CheckResult::new("split_per_image");
    let mut seen: HashMap<&str, Split> = HashMap::new();
    for inst in instances {
        let first = *seen.entry(&inst.image_id).or_insert(inst.split);
        check.record(first == inst.split, || format!("image {} appears in several splits", inst.image_id));
    }
    check
}

fn point_inside_gt(instances: &[PointQAInstance]) -> CheckResult {
    let mut check = CheckResult::new("point_inside_gt_box");
    for inst in instances {
        if let (Some(p), Some(b)) = (inst.point, inst.gt_box) {
            check.record(contains(&b, p).unwrap_or(false), || format!("{}: point outside gt box", inst.qa_id));
        }
    }
    check
}

/// Local dataset: point necessity, IoU below threshold, answer-set membership.
pub fn check_local(instances: &[PointQAInstance], iou_threshold: f64) -> Vec<CheckResult> {
    let mut groups: BTreeMap<(&str, &str), Vec<&PointQAInstance>> = BTreeMap::new();
    for inst in instances {
        groups.entry((&inst.image_id, &inst.question)).or_default().push(inst);
    }
    let mut necessity = CheckResult::new("point_necessity");
    let mut overlap = CheckResult::new("iou_below_threshold");
    for ((image, question), members) in &groups {
        let answers: BTreeSet<&str> = members.iter().map(|i| i.answer.as_str()).collect();
        necessity.record(answers.len() >= 2, || format!("{image}: {question:?} has a single answer"));
        for a in members {
            let partnered = members.iter().any(|b| {
                b.answer != a.answer
                    && b.point != a.point
                    && match (a.gt_box, b.gt_box) {
                        (Some(x), Some(y)) => iou(&x, &y).map(|v| v < iou_threshold).unwrap_or(false),
                        _ => false,
                    }
            });
            overlap.record(partnered, || format!("{}: no partner with IoU < {iou_threshold}", a.qa_id));
        }
    }
    let mut membership = CheckResult::new("answer_in_answer_set");
    for inst in instances {
        let ok = inst.meta.answer_set.as_ref().is_some_and(|s| s.contains(&inst.answer));
        membership.record(ok, || format!("{}: answer missing from answer_set", inst.qa_id));
    }
    vec![necessity, overlap, membership, point_inside_gt(instances), split_per_image(instances)]
}

/// LookTwice dataset: evaluation-image constraint, shared forms, counterparts.
pub fn check_looktwice(instances: &[PointQAInstance]) -> Vec<CheckResult> {
    let mut groups: BTreeMap<(&str, &str), Vec<&PointQAInstance>> = BTreeMap::new();
    for inst in instances {
        let source = inst.meta.source_qa_id.as_deref().unwrap_or(&inst.qa_id);
        groups.entry((&inst.image_id, source)).or_default().push(inst);
    }

    let mut forms = CheckResult::new("forms_share_point_answer");
    for ((image, source), members) in &groups {
        let kinds: BTreeSet<Option<QuestionForm>> = members.iter().map(|i| i.meta.question_form).collect();
        let first = members[0];
        let ok = members.len() == 3
            && kinds.len() == 3
            && members.iter().all(|i| i.point == first.point && i.answer == first.answer && i.split == first.split);
        forms.record(ok, || format!("{image}/{source}: forms disagree"));
    }

    let mut counterpart = CheckResult::new("counterpart_differs");
    for ((image, source), members) in &groups {
        let Some(base) = source.strip_suffix("-syn") else { continue };
        let ok = groups.get(&(*image, base)).is_some_and(|orig| {
            orig[0].meta.object_class != members[0].meta.object_class && orig[0].answer != members[0].answer
        });
        counterpart.record(ok, || format!("{image}/{source}: counterpart matches its source"));
    }

    let mut eval_synth = CheckResult::new("no_synthesized_in_eval");
    let mut per_image: BTreeMap<&str, Vec<&PointQAInstance>> = BTreeMap::new();
    for inst in instances {
        if inst.split.is_eval() {
            eval_synth.record(inst.meta.synthesized != Some(true), || format!("{}: synthesized in eval", inst.qa_id));
            if inst.meta.question_form == Some(QuestionForm::Object) {
                per_image.entry(&inst.image_id).or_default().push(inst);
            }
        }
    }
    let mut constraint = CheckResult::new("eval_image_constraint");
    let eval_images: BTreeSet<&str> = instances.iter().filter(|i| i.split.is_eval()).map(|i| i.image_id.as_str()).collect();
    for image in eval_images {
        let qs = per_image.get(image).map(Vec::as_slice).unwrap_or(&[]);
        let ok = qs.iter().enumerate().any(|(k, a)| {
            qs[k + 1..].iter().any(|b| a.meta.object_class != b.meta.object_class && a.answer != b.answer)
        });
        constraint.record(ok, || format!("{image}: no two questions differ in class and answer"));
    }
    vec![constraint, forms, counterpart, eval_synth, split_per_image(instances)]
}

/// General dataset: exact yes/no balance and complete sibling pairs.
pub fn check_general(instances: &[PointQAInstance]) -> Vec<CheckResult> {
    let mut balance = CheckResult::new("yes_no_balance");
    let mut per_image: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for inst in instances {
        let e = per_image.entry(&inst.image_id).or_default();
        match inst.answer.as_str() {
            "yes" => e.0 += 1,
            "no" => e.1 += 1,
            _ => {}
        }
    }
    let yes: usize = per_image.values().map(|v| v.0).sum();
    let no: usize = per_image.values().map(|v| v.1).sum();
    balance.record(yes == no && yes + no == instances.len(), || format!("global: {yes} yes vs {no} no"));
    for (image, (y, n)) in &per_image {
        balance.record(y == n, || format!("{image}: {y} yes vs {n} no"));
    }

    let mut siblings = CheckResult::new("sibling_pairs");
    let mut groups: BTreeMap<(&str, &str), Vec<&PointQAInstance>> = BTreeMap::new();
    for inst in instances {
        let source = inst.meta.source_qa_id.as_deref().unwrap_or(&inst.qa_id);
        groups.entry((&inst.image_id, source)).or_default().push(inst);
    }
    for ((image, source), members) in &groups {
        let ok = members.len() == 2
            && members.iter().filter(|i| i.answer == "yes").count() == 1
            && members[0].question == members[1].question
            && members[0].split == members[1].split
            && members[0].point != members[1].point;
        siblings.record(ok, || format!("{image}/{source}: incomplete sibling pair"));
    }
    vec![balance, siblings, split_per_image(instances)]
}

fn words(q: &str) -> Vec<String> {
    q.trim_end_matches('?').split_whitespace().map(str::to_lowercase).collect()
}

fn is_strict_subsequence(short: &[String], long: &[String]) -> bool {
    if short.len() >= long.len() {
        return false;
    }
    let mut it = long.iter();
    short.iter().all(|w| it.any(|x| x == w))
}

/// Verbal/spatial pair: identical ids, phrase removal, point inside the box.
pub fn check_dv_ds(verbal: &[PointQAInstance], spatial: &[PointQAInstance]) -> Vec<CheckResult> {
    let mut pairing = CheckResult::new("paired_ids");
    let dv_ids: BTreeSet<&str> = verbal.iter().map(|i| i.qa_id.as_str()).collect();
    let ds_ids: BTreeSet<&str> = spatial.iter().map(|i| i.qa_id.as_str()).collect();
    pairing.record(verbal.len() == spatial.len() && dv_ids == ds_ids, || {
        format!("|D_V|={} |D_S|={} with differing ids", verbal.len(), spatial.len())
    });
    let by_id: HashMap<&str, &PointQAInstance> = verbal.iter().map(|i| (i.qa_id.as_str(), i)).collect();
    let mut removal = CheckResult::new("phrase_removed");
    for s in spatial {
        let ok = by_id.get(s.qa_id.as_str()).is_some_and(|v| {
            v.answer == s.answer && v.point.is_none() && is_strict_subsequence(&words(&s.question), &words(&v.question))
        });
        removal.record(ok, || format!("{}: spatial question is not a phrase removal", s.qa_id));
    }
    let mut points = point_inside_gt(spatial);
    for s in spatial {
        points.record(s.point.is_some(), || format!("{}: spatial instance lacks a point", s.qa_id));
    }
    vec![pairing, removal, points, split_per_image(spatial)]
}
