//! Attribute questions that only a point can disambiguate.
//!
//! For two same-class objects carrying different attributes of one category,
//! the question "What {category} is this {object}?" has two valid answers in
//! the image, so each instance is emitted with a point at its object's center.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;

use super::{BuildError, BuildReport};
use crate::dataset::{assign_splits, validate_fractions, InstanceMeta, PointQAInstance, Split, Task, LOCAL_SPLITS};
use crate::geometry::{center_point, iou};
use crate::store::{AnnotationStore, AttributeTaxonomy, Category, ImageAnnotation};

#[derive(Debug, Clone)]
pub struct LocalConfig {
    pub iou_threshold: f64,
    pub split_fractions: Vec<(Split, f64)>,
    pub seed: u64,
    pub taxonomy: AttributeTaxonomy,
}

impl LocalConfig {
    pub fn new(taxonomy: AttributeTaxonomy, seed: u64) -> Self {
        Self { iou_threshold: 0.2, split_fractions: LOCAL_SPLITS.to_vec(), seed, taxonomy }
    }

    fn validate(&self) -> Result<(), BuildError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(BuildError::Config(format!("iou_threshold {} outside (0, 1]", self.iou_threshold)));
        }
        if self.taxonomy.is_empty() {
            return Err(BuildError::Config("taxonomy is empty".into()));
        }
        validate_fractions(&self.split_fractions)?;
        Ok(())
    }
}

/// Two objects (indices into `ImageAnnotation::objects`) that differ in one
/// attribute category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalPair {
    pub first: usize,
    pub second: usize,
    pub category: Category,
    pub first_attribute: String,
    pub second_attribute: String,
}

/// Surface form of the question for a category and object class.
pub fn local_question(category: Category, object: &str) -> String {
    match category {
        Category::Action => format!("What action is this {object} doing?"),
        c => format!("What {} is this {object}?", c.as_str()),
    }
}

/// All same-class object pairs with differing attributes of one category and
/// IoU below the threshold. Objects with two attributes in any single
/// category are excluded entirely.
pub fn find_local_pairs(img: &ImageAnnotation, taxonomy: &AttributeTaxonomy, iou_threshold: f64) -> Vec<LocalPair> {
    let attrs: Vec<Option<BTreeMap<Category, String>>> = img
        .objects
        .iter()
        .map(|o| {
            let by_cat = taxonomy.categorize(&o.attributes);
            if by_cat.values().any(|s| s.len() > 1) {
                None
            } else {
                Some(by_cat.into_iter().filter_map(|(c, s)| s.into_iter().next().map(|a| (c, a))).collect())
            }
        })
        .collect();
    let mut pairs = Vec::new();
    for i in 0..img.objects.len() {
        let Some(ai) = &attrs[i] else { continue };
        for j in i + 1..img.objects.len() {
            let Some(aj) = &attrs[j] else { continue };
            let (oi, oj) = (&img.objects[i], &img.objects[j]);
            if oi.class_name() != oj.class_name() {
                continue;
            }
            let overlap = iou(&oi.bbox, &oj.bbox).unwrap_or(1.0);
            if overlap >= iou_threshold {
                continue;
            }
            for (cat, a) in ai {
                if let Some(b) = aj.get(cat) {
                    if a != b {
                        pairs.push(LocalPair {
                            first: i,
                            second: j,
                            category: *cat,
                            first_attribute: a.clone(),
                            second_attribute: b.clone(),
                        });
                    }
                }
            }
        }
    }
    pairs
}

struct ImageOutput {
    instances: Vec<PointQAInstance>,
    coincident: usize,
}

fn build_image(img: &ImageAnnotation, config: &LocalConfig) -> ImageOutput {
    let pairs = find_local_pairs(img, &config.taxonomy, config.iou_threshold);
    let mut answer_sets: BTreeMap<(&str, Category), BTreeSet<String>> = BTreeMap::new();
    for o in &img.objects {
        for (cat, values) in config.taxonomy.categorize(&o.attributes) {
            answer_sets.entry((o.class_name(), cat)).or_default().extend(values);
        }
    }
    let mut seen = HashSet::new();
    let mut out = ImageOutput { instances: Vec::new(), coincident: 0 };
    for pair in pairs {
        let members = [(pair.first, &pair.first_attribute), (pair.second, &pair.second_attribute)];
        let points: Vec<_> = members
            .iter()
            .map(|(i, _)| center_point(&img.objects[*i].bbox).expect("validated on load"))
            .collect();
        // A shared center cannot disambiguate the pair.
        if points[0] == points[1] {
            out.coincident += 1;
            continue;
        }
        for ((idx, answer), point) in members.into_iter().zip(points) {
            let o = &img.objects[idx];
            let question = local_question(pair.category, o.class_name());
            if !seen.insert((question.clone(), point)) {
                continue;
            }
            let mut meta = InstanceMeta::new(Task::Local);
            meta.category = Some(pair.category.as_str().into());
            meta.object_class = Some(o.class_name().into());
            meta.object_id = Some(o.object_id.clone());
            meta.answer_set = Some(answer_sets[&(o.class_name(), pair.category)].iter().cloned().collect());
            out.instances.push(PointQAInstance {
                qa_id: format!("local-{}-{}", img.image_id, out.instances.len()),
                image_id: img.image_id.clone(),
                question,
                point: Some(point),
                gt_box: Some(o.bbox),
                answer: answer.clone(),
                split: Split::Train,
                meta,
            });
        }
    }
    out
}

/// Builds the full dataset; instances are ordered by image id, then by
/// generation order within the image.
pub fn build_local_dataset(
    store: &AnnotationStore,
    config: &LocalConfig,
) -> Result<(Vec<PointQAInstance>, BuildReport), BuildError> {
    config.validate()?;
    let images: Vec<&ImageAnnotation> = store.iter().collect();
    let outputs: Vec<ImageOutput> = images.par_iter().map(|img| build_image(img, config)).collect();

    let mut report = BuildReport::new("local", config.seed, store.len());
    let used: Vec<String> = images
        .iter()
        .zip(&outputs)
        .filter(|(_, o)| !o.instances.is_empty())
        .map(|(img, _)| img.image_id.clone())
        .collect();
    let splits = assign_splits(&used, &config.split_fractions, config.seed)?;
    let mut instances = Vec::new();
    for out in outputs {
        report.skip("coincident_pair_points", out.coincident);
        for mut inst in out.instances {
            inst.split = splits[&inst.image_id];
            *report.breakdown.entry(inst.meta.category.clone().unwrap_or_default()).or_default() += 1;
            instances.push(inst);
        }
    }
    report.skip("images_without_pairs", store.len() - used.len());
    report.tally(&instances);
    Ok((instances, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{build_taxonomy, default_category_map, default_synonym_map};
    use crate::testutil::{image, obj, store};

    fn taxonomy(store: &AnnotationStore) -> AttributeTaxonomy {
        build_taxonomy(store, 100, &default_synonym_map(), &default_category_map()).unwrap().taxonomy
    }

    #[test]
    fn shirt_pair_color() {
        let img = image(
            "i",
            vec![obj("a", "shirt", (0, 0, 20, 20), &["red"]), obj("b", "shirt", (50, 50, 20, 20), &["blue"])],
            vec![],
        );
        let s = store(vec![img.clone()]);
        let pairs = find_local_pairs(&img, &taxonomy(&s), 0.2);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].category, Category::Color);

        let (inst, _) = build_local_dataset(&s, &LocalConfig::new(taxonomy(&s), 1)).unwrap();
        assert_eq!(inst.len(), 2);
        assert_eq!(inst[0].question, "What color is this shirt?");
        assert_eq!(inst[0].answer, "red");
        assert_eq!(inst[0].point, Some(crate::geometry::Point::new(10, 10)));
        assert_eq!(inst[1].answer, "blue");
        assert_eq!(inst[1].point, Some(crate::geometry::Point::new(60, 60)));
        assert_eq!(inst[0].meta.answer_set.as_deref(), Some(&["blue".to_string(), "red".to_string()][..]));
    }

    #[test]
    fn overlapping_pair_filtered() {
        // iou = 0.3 > 0.2
        let img = image(
            "i",
            vec![obj("a", "shirt", (0, 0, 10, 13), &["red"]), obj("b", "shirt", (0, 7, 10, 13), &["blue"])],
            vec![],
        );
        let ov = iou(&img.objects[0].bbox, &img.objects[1].bbox).unwrap();
        assert!((ov - 0.3).abs() < 1e-12, "{ov}");
        let s = store(vec![img.clone()]);
        assert!(find_local_pairs(&img, &taxonomy(&s), 0.2).is_empty());
    }

    #[test]
    fn multi_color_object_excluded() {
        let img = image(
            "i",
            vec![
                obj("a", "shirt", (0, 0, 20, 20), &["red", "white"]),
                obj("b", "shirt", (50, 50, 20, 20), &["blue"]),
                obj("c", "shirt", (100, 100, 20, 20), &["blue"]),
            ],
            vec![],
        );
        let s = store(vec![img.clone()]);
        assert!(find_local_pairs(&img, &taxonomy(&s), 0.2).is_empty());
    }

    #[test]
    fn action_question_form() {
        let img = image(
            "i",
            vec![
                obj("a", "person", (0, 0, 20, 40), &["standing"]),
                obj("b", "person", (60, 0, 20, 40), &["sitting"]),
            ],
            vec![],
        );
        let s = store(vec![img]);
        let (inst, _) = build_local_dataset(&s, &LocalConfig::new(taxonomy(&s), 1)).unwrap();
        assert_eq!(inst.len(), 2);
        assert!(inst.iter().all(|i| i.question == "What action is this person doing?"));
    }

    #[test]
    fn no_pairs_no_instances() {
        let img = image("i", vec![obj("a", "shirt", (0, 0, 20, 20), &["red"])], vec![]);
        let s = store(vec![img]);
        let (inst, report) = build_local_dataset(&s, &LocalConfig::new(taxonomy(&s), 1)).unwrap();
        assert!(inst.is_empty());
        assert_eq!(report.skipped["images_without_pairs"], 1);
    }

    #[test]
    fn shared_object_deduplicated() {
        // the red shirt pairs with both blue and green shirts but is emitted once
        let img = image(
            "i",
            vec![
                obj("a", "shirt", (0, 0, 20, 20), &["red"]),
                obj("b", "shirt", (50, 50, 20, 20), &["blue"]),
                obj("c", "shirt", (100, 100, 20, 20), &["green"]),
            ],
            vec![],
        );
        let s = store(vec![img]);
        let (inst, _) = build_local_dataset(&s, &LocalConfig::new(taxonomy(&s), 1)).unwrap();
        assert_eq!(inst.len(), 3);
        assert!(inst.iter().all(|i| i.meta.answer_set.as_ref().unwrap().len() == 3));
    }

    #[test]
    fn rejects_bad_config() {
        let s = store(vec![]);
        let mut c = LocalConfig::new(AttributeTaxonomy::default(), 1);
        assert!(build_local_dataset(&s, &c).is_err());
        c.taxonomy.category_of.insert("red".into(), Category::Color);
        c.iou_threshold = 0.0;
        assert!(build_local_dataset(&s, &c).is_err());
        c.iou_threshold = 0.2;
        let (inst, _) = build_local_dataset(&s, &c).unwrap();
        assert!(inst.is_empty());
    }
}
