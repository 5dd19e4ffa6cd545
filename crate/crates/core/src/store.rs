//! Scene-graph annotation store and attribute taxonomy.
//!
//! Annotations arrive as JSON Lines, one image per line. Records are
//! normalized once on load (names and attributes lowercased, whitespace
//! collapsed, attributes deduplicated) and kept in an immutable store that
//! iterates in `image_id` order.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;
use crate::text::{collapse_whitespace, normalize};

/// Fraction of malformed records above which a load is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt input: {malformed} of {total} records malformed")]
    Corrupt { malformed: usize, total: usize },
    #[error("invalid map file {path}: {message}")]
    BadMap { path: String, message: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub object_id: String,
    pub names: Vec<String>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub attributes: Vec<String>,
}

impl ObjectAnnotation {
    /// The canonical (first) class name.
    pub fn class_name(&self) -> &str {
        &self.names[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceQA {
    pub qa_id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_boxes: Option<Vec<AnswerBox>>,
}

impl SourceQA {
    /// Index of the single correct box when the multiple-choice set is
    /// well formed: exactly four boxes, exactly one marked correct.
    pub fn correct_index(&self) -> Option<usize> {
        let boxes = self.answer_boxes.as_ref()?;
        if boxes.len() != 4 {
            return None;
        }
        let mut correct = boxes.iter().enumerate().filter(|(_, b)| b.correct);
        match (correct.next(), correct.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    pub objects: Vec<ObjectAnnotation>,
    #[serde(default)]
    pub source_qas: Vec<SourceQA>,
}

impl ImageAnnotation {
    /// Normalizes text fields in place and checks structural invariants.
    fn normalize_and_validate(&mut self) -> Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err("zero image dimension".into());
        }
        let mut ids = HashSet::new();
        for obj in &mut self.objects {
            if !ids.insert(obj.object_id.clone()) {
                return Err(format!("duplicate object_id {}", obj.object_id));
            }
            obj.names = obj.names.iter().map(|n| normalize(n)).filter(|n| !n.is_empty()).collect();
            if obj.names.is_empty() {
                return Err(format!("object {} has no names", obj.object_id));
            }
            let mut seen = HashSet::new();
            obj.attributes = obj
                .attributes
                .iter()
                .map(|a| normalize(a))
                .filter(|a| !a.is_empty() && seen.insert(a.clone()))
                .collect();
            obj.bbox.validate_within(self.width, self.height).map_err(|e| e.to_string())?;
        }
        for qa in &mut self.source_qas {
            qa.question = collapse_whitespace(&qa.question);
            qa.answer = normalize(&qa.answer);
            if !qa.question.ends_with('?') {
                return Err(format!("question {} does not end with '?'", qa.qa_id));
            }
            if let Some(boxes) = &qa.answer_boxes {
                for b in boxes {
                    b.bbox.validate().map_err(|e| e.to_string())?;
                }
            }
        }
        Ok(())
    }
}

/// Immutable, `image_id`-ordered collection of annotations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationStore {
    images: BTreeMap<String, ImageAnnotation>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub loaded: usize,
    pub skipped: usize,
}

impl AnnotationStore {
    /// Builds a store from already-normalized records. Later duplicates of an
    /// `image_id` replace earlier ones.
    pub fn from_images(images: impl IntoIterator<Item = ImageAnnotation>) -> Self {
        Self { images: images.into_iter().map(|i| (i.image_id.clone(), i)).collect() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageAnnotation> {
        self.images.get(image_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageAnnotation> {
        self.images.values()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    /// Writes the store as JSON Lines in `image_id` order.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), StoreError> {
        let io = |source| StoreError::Io { path: path.display().to_string(), source };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        for img in self.iter() {
            let line = serde_json::to_string(img).expect("annotation serializes");
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Parses one JSON Lines document. Malformed records are skipped and counted.
pub fn parse_annotations(reader: impl BufRead) -> Result<(AnnotationStore, LoadStats), std::io::Error> {
    let mut images = Vec::new();
    let mut stats = LoadStats::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<ImageAnnotation>(&line).ok();
        match parsed.and_then(|mut img| img.normalize_and_validate().ok().map(|_| img)) {
            Some(img) => {
                stats.loaded += 1;
                images.push(img);
            }
            None => stats.skipped += 1,
        }
    }
    Ok((AnnotationStore::from_images(images), stats))
}

/// Loads a JSON Lines annotation file.
pub fn load_annotations(path: &Path) -> Result<(AnnotationStore, LoadStats), StoreError> {
    let io = |source| StoreError::Io { path: path.display().to_string(), source };
    let file = File::open(path).map_err(io)?;
    let (store, stats) = parse_annotations(BufReader::new(file)).map_err(io)?;
    let total = stats.loaded + stats.skipped;
    if total > 0 && stats.skipped as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(StoreError::Corrupt { malformed: stats.skipped, total });
    }
    Ok((store, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Color,
    Shape,
    Action,
    Size,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Color => "color",
            Category::Shape => "shape",
            Category::Action => "action",
            Category::Size => "size",
        }
    }
}

/// Attribute → category assignment plus synonym collapsing. Never contains
/// the size category.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeTaxonomy {
    pub category_of: BTreeMap<String, Category>,
    pub canonical_of: BTreeMap<String, String>,
}

impl AttributeTaxonomy {
    pub fn is_empty(&self) -> bool {
        self.category_of.is_empty()
    }

    /// Canonical attribute and its category, if the raw attribute survived
    /// the taxonomy cut.
    pub fn lookup(&self, raw: &str) -> Option<(&str, Category)> {
        let canonical = self.canonical_of.get(raw)?;
        let category = *self.category_of.get(canonical)?;
        Some((canonical.as_str(), category))
    }

    /// Distinct canonical attributes of an object grouped by category.
    pub fn categorize(&self, attributes: &[String]) -> BTreeMap<Category, BTreeSet<String>> {
        let mut out: BTreeMap<Category, BTreeSet<String>> = BTreeMap::new();
        for a in attributes {
            if let Some((canonical, cat)) = self.lookup(a) {
                out.entry(cat).or_default().insert(canonical.to_string());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TaxonomyReport {
    pub taxonomy: AttributeTaxonomy,
    /// Attributes inside the top-k cut that the category map does not cover.
    pub uncategorized: Vec<String>,
    /// Attributes inside the cut dropped because they describe size.
    pub dropped_size: Vec<String>,
}

/// Keeps the `top_k` most frequent attributes (ties lexicographic), collapses
/// synonyms, and drops size attributes.
pub fn build_taxonomy(
    store: &AnnotationStore,
    top_k: usize,
    synonym_map: &BTreeMap<String, String>,
    category_map: &BTreeMap<String, Category>,
) -> Result<TaxonomyReport, StoreError> {
    if top_k == 0 {
        return Err(StoreError::Precondition("top_k must be at least 1".into()));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for obj in store.iter().flat_map(|img| &img.objects) {
        for a in &obj.attributes {
            *freq.entry(a.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(top_k);

    let mut report = TaxonomyReport::default();
    for (raw, _) in ranked {
        let canonical = synonym_map.get(raw).map(|c| normalize(c)).unwrap_or_else(|| raw.to_string());
        let category = category_map.get(&canonical).or_else(|| category_map.get(raw)).copied();
        match category {
            None => report.uncategorized.push(raw.to_string()),
            Some(Category::Size) => report.dropped_size.push(raw.to_string()),
            Some(cat) => {
                report.taxonomy.category_of.insert(canonical.clone(), cat);
                report.taxonomy.canonical_of.insert(raw.to_string(), canonical);
            }
        }
    }
    report.uncategorized.sort();
    report.dropped_size.sort();
    Ok(report)
}

fn read_map<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<BTreeMap<String, V>, StoreError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
    let raw: BTreeMap<String, V> = serde_json::from_str(&text)
        .map_err(|e| StoreError::BadMap { path: path.display().to_string(), message: e.to_string() })?;
    Ok(raw.into_iter().map(|(k, v)| (normalize(&k), v)).collect())
}

/// Reads a `{"attribute": "category"}` map.
pub fn load_category_map(path: &Path) -> Result<BTreeMap<String, Category>, StoreError> {
    read_map(path)
}

/// Reads a `{"raw": "canonical"}` synonym map.
pub fn load_synonym_map(path: &Path) -> Result<BTreeMap<String, String>, StoreError> {
    Ok(read_map::<String>(path)?.into_iter().map(|(k, v)| (k, normalize(&v))).collect())
}

const DEFAULT_CATEGORIES: &str = include_str!("../data/categories.json");
const DEFAULT_SYNONYMS: &str = include_str!("../data/synonyms.json");

/// The category map shipped with the crate (`data/categories.json`).
pub fn default_category_map() -> BTreeMap<String, Category> {
    serde_json::from_str(DEFAULT_CATEGORIES).expect("bundled category map parses")
}

/// The synonym map shipped with the crate (`data/synonyms.json`).
pub fn default_synonym_map() -> BTreeMap<String, String> {
    serde_json::from_str(DEFAULT_SYNONYMS).expect("bundled synonym map parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn record(id: &str) -> String {
        format!(
            r#"{{"image_id":"{id}","width":100,"height":80,"objects":[{{"object_id":"o1","names":[" Shirt "],"box":{{"x":0,"y":0,"w":10,"h":10}},"attributes":["Red","red "]}}],"source_qas":[{{"qa_id":"q1","question":"What  color is it?","answer":"Red"}}]}}"#
        )
    }

    #[test]
    fn loads_and_normalizes() {
        let text = [record("b"), record("a"), record("c")].join("\n");
        let (store, stats) = parse_annotations(Cursor::new(text)).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(stats.skipped, 0);
        assert_eq!(store.image_ids().collect::<Vec<_>>(), vec!["a", "b", "c"]);
        let obj = &store.get("a").unwrap().objects[0];
        assert_eq!(obj.names, vec!["shirt"]);
        assert_eq!(obj.attributes, vec!["red"]);
        assert_eq!(store.get("a").unwrap().source_qas[0].question, "What color is it?");
    }

    #[test]
    fn missing_objects_is_skipped() {
        let text = r#"{"image_id":"x","width":10,"height":10,"source_qas":[]}"#;
        let (store, stats) = parse_annotations(Cursor::new(text)).unwrap();
        assert_eq!(store.len(), 0);
        assert_eq!(stats.skipped, 1);
    }

    #[test]
    fn out_of_bounds_box_is_malformed() {
        let text = r#"{"image_id":"x","width":10,"height":10,"objects":[{"object_id":"o","names":["a"],"box":{"x":5,"y":5,"w":10,"h":2}}]}"#;
        let (_, stats) = parse_annotations(Cursor::new(text)).unwrap();
        assert_eq!(stats.skipped, 1);
    }

    #[test]
    fn empty_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "").unwrap();
        let (store, stats) = load_annotations(&p).unwrap();
        assert!(store.is_empty());
        assert_eq!(stats, LoadStats::default());
    }

    #[test]
    fn mostly_malformed_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, format!("{}\nnot json\n", record("a"))).unwrap();
        assert!(matches!(load_annotations(&p), Err(StoreError::Corrupt { malformed: 1, total: 2 })));
        assert!(matches!(load_annotations(&dir.path().join("missing")), Err(StoreError::Io { .. })));
    }

    #[test]
    fn write_then_load_is_identical() {
        let text = [record("b"), record("a")].join("\n");
        let (store, _) = parse_annotations(Cursor::new(text)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        store.write_jsonl(&p).unwrap();
        let (again, _) = load_annotations(&p).unwrap();
        assert_eq!(store, again);
    }

    fn attr_store(counts: &[(&str, usize)]) -> AnnotationStore {
        let mut objects = Vec::new();
        for (attr, n) in counts {
            for i in 0..*n {
                objects.push(ObjectAnnotation {
                    object_id: format!("{attr}{i}"),
                    names: vec!["thing".into()],
                    bbox: BoundingBox { x: 0., y: 0., w: 1., h: 1. },
                    attributes: vec![attr.to_string()],
                });
            }
        }
        AnnotationStore::from_images([ImageAnnotation {
            image_id: "i".into(),
            width: 10,
            height: 10,
            image_uri: None,
            objects,
            source_qas: vec![],
        }])
    }

    #[test]
    fn taxonomy_drops_size() {
        let store = attr_store(&[("red", 50), ("round", 10), ("large", 8), ("blue", 2)]);
        let report = build_taxonomy(&store, 3, &default_synonym_map(), &default_category_map()).unwrap();
        let t = &report.taxonomy;
        assert_eq!(t.lookup("red"), Some(("red", Category::Color)));
        assert_eq!(t.lookup("round"), Some(("round", Category::Shape)));
        assert_eq!(t.lookup("large"), None);
        assert_eq!(t.lookup("blue"), None);
        assert_eq!(report.dropped_size, vec!["large"]);
        assert!(t.category_of.values().all(|c| *c != Category::Size));
    }

    #[test]
    fn taxonomy_collapses_synonyms() {
        let store = attr_store(&[("blonde", 5), ("yellow", 3)]);
        let syn = BTreeMap::from([("blonde".to_string(), "yellow".to_string())]);
        let report = build_taxonomy(&store, 10, &syn, &default_category_map()).unwrap();
        assert_eq!(report.taxonomy.lookup("blonde"), Some(("yellow", Category::Color)));
        assert_eq!(report.taxonomy.category_of.len(), 1);
    }

    #[test]
    fn taxonomy_reports_uncategorized_and_rejects_zero_k() {
        let store = attr_store(&[("zorby", 4), ("red", 2)]);
        let report = build_taxonomy(&store, 5, &BTreeMap::new(), &default_category_map()).unwrap();
        assert_eq!(report.uncategorized, vec!["zorby"]);
        assert!(matches!(
            build_taxonomy(&store, 0, &BTreeMap::new(), &default_category_map()),
            Err(StoreError::Precondition(_))
        ));
        let empty = build_taxonomy(&AnnotationStore::default(), 5, &BTreeMap::new(), &BTreeMap::new()).unwrap();
        assert!(empty.taxonomy.is_empty());
    }

    #[test]
    fn taxonomy_cut_respects_frequency() {
        // ties at the boundary resolve lexicographically
        let store = attr_store(&[("red", 5), ("blue", 3), ("green", 3), ("white", 3), ("black", 1)]);
        let cat = default_category_map();
        let report = build_taxonomy(&store, 3, &BTreeMap::new(), &cat).unwrap();
        let kept: Vec<_> = report.taxonomy.category_of.keys().cloned().collect();
        assert_eq!(kept, vec!["blue", "green", "red"]);
        // brute-force recount: every kept attribute is at least as frequent as every excluded one
        let count = |a: &str| store.iter().flat_map(|i| &i.objects).filter(|o| o.attributes.iter().any(|x| x == a)).count();
        for k in &kept {
            for e in ["white", "black"] {
                assert!(count(k) >= count(e));
            }
        }
    }

    #[test]
    fn correct_index_requires_four_and_one() {
        let b = |c| AnswerBox { bbox: BoundingBox { x: 0., y: 0., w: 1., h: 1. }, correct: c };
        let mut qa = SourceQA { qa_id: "q".into(), question: "Which?".into(), answer: "".into(), answer_boxes: None };
        assert_eq!(qa.correct_index(), None);
        qa.answer_boxes = Some(vec![b(false), b(true), b(false), b(false)]);
        assert_eq!(qa.correct_index(), Some(1));
        qa.answer_boxes = Some(vec![b(false), b(true), b(false)]);
        assert_eq!(qa.correct_index(), None);
        qa.answer_boxes = Some(vec![b(true), b(true), b(false), b(false)]);
        assert_eq!(qa.correct_index(), None);
    }
}
