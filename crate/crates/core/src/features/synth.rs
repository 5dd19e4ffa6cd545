//! A seeded toy world for desk-scale experiments.
//!
//! Each image is a grid of non-overlapping objects. Every object has a class
//! and either a color or an action; holder objects (say, a person) may carry
//! a part (a shirt) nested inside them. Proposals are the exact object boxes,
//! jittered copies, optional background boxes, and one full-image "scene"
//! proposal. Feature vectors are noisy one-hot blocks for class, color and
//! action, a scene flag, and normalized box geometry:
//!
//! ```text
//! [ class | color | action | scene | x/W y/H w/W h/H | zero padding ]
//! ```
//!
//! The [`SynthOracle`] answers questions by reading the world state, so
//! labels never depend on the dataset builders.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureStore, ProposalSet};
use crate::builders::{bin_count_answer, build_local_dataset, image_rng, BuildError, LocalConfig};
use crate::dataset::{assign_splits, InstanceMeta, PointQAInstance, Split, Task, THREE_WAY_SPLITS};
use crate::geometry::{center_point, contains_unchecked, BoundingBox, Point};
use crate::store::{AnnotationStore, AnswerBox, AttributeTaxonomy, Category, ImageAnnotation, ObjectAnnotation, SourceQA};
use crate::text::{pluralize, singularize};

/// A part nested inside every object of the holder class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub holder: String,
    pub part: String,
}

/// How many objects of which classes an image contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Composition {
    /// `K` objects with `K` drawn from the range. One class, chosen per image,
    /// gets at least `min_same_class` of them; the rest draw classes uniformly.
    Mixed { objects_per_image: (usize, usize), min_same_class: usize },
    /// Every class appears with a count `c ∈ 1..=max_per_class` drawn with
    /// probability proportional to `1/c`, so each count is equally common
    /// among objects (and thus among count questions).
    CountBalanced { max_per_class: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthWorldConfig {
    pub num_images: usize,
    pub classes: Vec<String>,
    pub colors: Vec<String>,
    /// Attribute vocabulary for `action_class` objects, which get an action
    /// instead of a color.
    pub actions: Vec<String>,
    pub action_class: Option<String>,
    pub part: Option<PartSpec>,
    pub composition: Composition,
    /// Same-class objects in one image get distinct attributes while the
    /// vocabulary lasts.
    pub distinct_attributes: bool,
    /// Per-image scale factor applied to every object.
    pub scale_range: (f64, f64),
    /// Per-object extent as a fraction of its grid cell, before scaling.
    pub size_range: (f64, f64),
    /// Minimum area ratio between same-class objects (1.0 disables).
    pub min_area_ratio: f64,
    pub canvas: (u32, u32),
    pub feature_dim: usize,
    pub noise: f64,
    pub jitter_proposals: usize,
    pub spurious_proposals: usize,
    pub scene_proposal: bool,
    pub tasks: Vec<SynthTask>,
    /// Superlatives asked by the comparative task, from {largest, smallest}.
    pub comparative_words: Vec<String>,
    /// Attach count, which, and phrase-disambiguated questions to every
    /// annotation so the LookTwice, General and verbal/spatial builders can
    /// run on the world.
    pub source_questions: bool,
    pub seed: u64,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        Self {
            num_images: 100,
            classes: vec!["shirt".into(), "car".into()],
            colors: ["red", "blue", "green", "yellow"].map(String::from).to_vec(),
            actions: Vec::new(),
            action_class: None,
            part: None,
            composition: Composition::Mixed { objects_per_image: (3, 5), min_same_class: 2 },
            distinct_attributes: true,
            scale_range: (1.0, 1.0),
            size_range: (0.5, 0.9),
            min_area_ratio: 1.0,
            canvas: (240, 240),
            feature_dim: 16,
            noise: 0.1,
            jitter_proposals: 2,
            spurious_proposals: 2,
            scene_proposal: true,
            tasks: vec![SynthTask::Local],
            comparative_words: vec!["largest".into(), "smallest".into()],
            source_questions: false,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    /// Local-style attribute questions, built by the Local builder.
    Local,
    /// "How many of these are there?" for every top-level object.
    Count,
    /// "Is this the largest/smallest X?" mixed with color questions.
    Comparative,
}

impl SynthTask {
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::Count => "count",
            Self::Comparative => "comparative",
        }
    }
}

/// Column layout of the synthetic feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    pub classes: Vec<String>,
    pub colors: Vec<String>,
    pub actions: Vec<String>,
}

impl FeatureLayout {
    pub fn class_col(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }
    pub fn color_col(&self, color: &str) -> Option<usize> {
        self.colors.iter().position(|c| c == color).map(|i| self.classes.len() + i)
    }
    pub fn action_col(&self, action: &str) -> Option<usize> {
        self.actions.iter().position(|c| c == action).map(|i| self.classes.len() + self.colors.len() + i)
    }
    pub fn scene_col(&self) -> usize {
        self.classes.len() + self.colors.len() + self.actions.len()
    }
    pub fn geometry_cols(&self) -> std::ops::Range<usize> {
        let s = self.scene_col() + 1;
        s..s + 4
    }
    pub fn required_dim(&self) -> usize {
        self.geometry_cols().end
    }
}

impl SynthWorldConfig {
    pub fn layout(&self) -> FeatureLayout {
        let mut classes = self.classes.clone();
        if let Some(p) = &self.part {
            if !classes.contains(&p.part) {
                classes.push(p.part.clone());
            }
        }
        FeatureLayout { classes, colors: self.colors.clone(), actions: self.actions.clone() }
    }

    fn max_objects(&self) -> usize {
        match self.composition {
            Composition::Mixed { objects_per_image: (_, hi), .. } => hi,
            Composition::CountBalanced { max_per_class } => max_per_class * self.classes.len(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_images == 0 {
            return Err("num_images must be positive".into());
        }
        if self.classes.is_empty() || self.colors.is_empty() {
            return Err("class and color vocabularies must be non-empty".into());
        }
        let unique = |v: &[String]| v.iter().collect::<BTreeSet<_>>().len() == v.len();
        if !unique(&self.classes) || !unique(&self.colors) || !unique(&self.actions) {
            return Err("vocabularies must not repeat entries".into());
        }
        if let Some(a) = &self.action_class {
            if self.actions.is_empty() || !self.classes.contains(a) {
                return Err(format!("action_class {a} needs a non-empty action vocabulary and must be a class"));
            }
        }
        if let Some(p) = &self.part {
            if !self.classes.contains(&p.holder) {
                return Err(format!("part holder {} is not a class", p.holder));
            }
            if self.classes.contains(&p.part) {
                return Err(format!("part {} must not also be a top-level class", p.part));
            }
        }
        match self.composition {
            Composition::Mixed { objects_per_image: (lo, hi), min_same_class } => {
                if lo == 0 || lo > hi || min_same_class > lo {
                    return Err(format!("objects_per_image ({lo}, {hi}) with min_same_class {min_same_class} is inconsistent"));
                }
            }
            Composition::CountBalanced { max_per_class } => {
                if max_per_class == 0 {
                    return Err("max_per_class must be positive".into());
                }
            }
        }
        let need = self.layout().required_dim();
        if self.feature_dim < 8 || self.feature_dim < need {
            return Err(format!("feature_dim {} below the required {}", self.feature_dim, need.max(8)));
        }
        let ordered = |r: (f64, f64)| r.0 > 0.0 && r.0 <= r.1 && r.1 <= 1.0;
        if !ordered(self.scale_range) || !ordered(self.size_range) {
            return Err("scale_range and size_range must satisfy 0 < lo ≤ hi ≤ 1".into());
        }
        if let Some(w) = self.comparative_words.iter().find(|w| *w != "largest" && *w != "smallest") {
            return Err(format!("unsupported comparative word {w:?}"));
        }
        if self.min_area_ratio.is_nan() || self.min_area_ratio < 1.0 {
            return Err("min_area_ratio must be ≥ 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err("noise must be a non-negative number".into());
        }
        let cells = grid_side(self.max_objects());
        if self.canvas.0 / (cells as u32) < 16 || self.canvas.1 / (cells as u32) < 16 {
            return Err(format!("canvas {:?} too small for a {cells}×{cells} grid", self.canvas));
        }
        Ok(())
    }
}

fn grid_side(objects: usize) -> usize {
    (objects as f64).sqrt().ceil().max(1.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub object_id: String,
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    pub bbox: BoundingBox,
    /// Object id of the holder for parts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<SynthObject>,
}

impl SynthImage {
    fn to_annotation(&self, with_questions: bool) -> ImageAnnotation {
        ImageAnnotation {
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            image_uri: None,
            objects: self
                .objects
                .iter()
                .map(|o| ObjectAnnotation {
                    object_id: o.object_id.clone(),
                    names: vec![o.class.clone()],
                    bbox: o.bbox,
                    attributes: o.color.iter().chain(&o.action).cloned().collect(),
                })
                .collect(),
            source_qas: if with_questions { self.source_questions() } else { Vec::new() },
        }
    }

    /// Ground-truth questions over top-level objects, per class in name
    /// order: a count question; for classes with several objects, a
    /// which-question per uniquely colored object and one size question
    /// disambiguated by a color phrase.
    fn source_questions(&self) -> Vec<SourceQA> {
        let mut by_class: BTreeMap<&str, Vec<&SynthObject>> = BTreeMap::new();
        for o in self.objects.iter().filter(|o| o.part_of.is_none()) {
            by_class.entry(&o.class).or_default().push(o);
        }
        let mut out = Vec::new();
        for (class, objs) in &by_class {
            let id = |kind: &str, k: usize| format!("{}-{kind}-{class}-{k}", self.image_id);
            out.push(SourceQA { qa_id: id("count", 0), question: count_question(class), answer: objs.len().to_string(), answer_boxes: None });
            if objs.len() < 2 {
                continue;
            }
            let unique = |c: &str| objs.iter().filter(|o| o.color.as_deref() == Some(c)).count() == 1;
            let largest = objs.iter().map(|o| o.bbox.area()).fold(f64::MIN, f64::max);
            for (k, o) in objs.iter().enumerate() {
                let Some(color) = o.color.as_deref().filter(|c| unique(c)) else { continue };
                let boxes = objs.iter().map(|x| AnswerBox { bbox: x.bbox, correct: x.object_id == o.object_id }).collect();
                out.push(SourceQA {
                    qa_id: id("which", k),
                    question: format!("Which {class} is {color}?"),
                    answer: color.to_string(),
                    answer_boxes: Some(boxes),
                });
                if k == 0 {
                    let size = if o.bbox.area() == largest { "large" } else { "small" };
                    out.push(SourceQA {
                        qa_id: id("phrase", k),
                        question: format!("How big is the {class} with {color} paint?"),
                        answer: size.to_string(),
                        answer_boxes: None,
                    });
                }
            }
        }
        out
    }
}

/// Ground truth for every generated image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthOracle {
    pub images: BTreeMap<String, SynthImage>,
}

impl SynthOracle {
    /// The smallest object containing the point, optionally of one class.
    pub fn pointed(&self, image_id: &str, class: Option<&str>, point: Point) -> Option<&SynthObject> {
        let img = self.images.get(image_id)?;
        img.objects
            .iter()
            .filter(|o| class.is_none_or(|c| o.class == c) && contains_unchecked(&o.bbox, point))
            .min_by(|a, b| a.bbox.area().total_cmp(&b.bbox.area()))
    }

    fn count_class(&self, image_id: &str, class: &str) -> usize {
        self.images.get(image_id).map_or(0, |img| img.objects.iter().filter(|o| o.class == class).count())
    }

    /// Answers the question templates this world generates. `None` means
    /// the question is outside the grammar or the point hits nothing
    /// relevant.
    pub fn answer(&self, image_id: &str, question: &str, point: Option<Point>) -> Option<String> {
        let q = question.trim().trim_end_matches('?').trim();
        if let Some(rest) = q.strip_prefix("How many ").and_then(|r| r.strip_suffix(" are there")) {
            let class = match rest.strip_prefix("of these") {
                Some(_) => self.pointed(image_id, None, point?)?.class.clone(),
                None => singularize(rest),
            };
            let n = self.count_class(image_id, &class);
            return bin_count_answer(n).ok().map(|a| a.label().to_string());
        }
        if let Some(class) = q.strip_prefix("What color is this ") {
            return self.pointed(image_id, Some(class), point?)?.color.clone();
        }
        if let Some(class) = q.strip_prefix("What action is this ").and_then(|r| r.strip_suffix(" doing")) {
            return self.pointed(image_id, Some(class), point?)?.action.clone();
        }
        for (word, largest) in [("largest", true), ("smallest", false)] {
            if let Some(class) = q.strip_prefix(&format!("Is this the {word} ") as &str) {
                let target = self.pointed(image_id, Some(class), point?)?;
                let img = &self.images[image_id];
                let a = target.bbox.area();
                let extreme = img
                    .objects
                    .iter()
                    .filter(|o| o.class == class && o.object_id != target.object_id)
                    .all(|o| if largest { o.bbox.area() < a } else { o.bbox.area() > a });
                return Some(if extreme { "yes" } else { "no" }.to_string());
            }
        }
        None
    }
}

pub struct SynthWorld {
    pub config: SynthWorldConfig,
    pub store: AnnotationStore,
    pub features: FeatureStore,
    pub oracle: SynthOracle,
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn class_counts(config: &SynthWorldConfig, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
    match config.composition {
        Composition::Mixed { objects_per_image: (lo, hi), min_same_class } => {
            let k = rng.random_range(lo..=hi);
            let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
            let primary = config.classes.choose(rng).expect("validated non-empty");
            *counts.entry(primary).or_default() += min_same_class;
            for _ in min_same_class..k {
                *counts.entry(config.classes.choose(rng).unwrap()).or_default() += 1;
            }
            config.classes.iter().filter_map(|c| counts.get(c).map(|n| (c.clone(), *n))).collect()
        }
        Composition::CountBalanced { max_per_class } => {
            let weights: Vec<f64> = (1..=max_per_class).map(|c| 1.0 / c as f64).collect();
            let total: f64 = weights.iter().sum();
            config
                .classes
                .iter()
                .map(|c| {
                    let mut u = rng.random_range(0.0..total);
                    let mut n = max_per_class;
                    for (i, w) in weights.iter().enumerate() {
                        if u < *w {
                            n = i + 1;
                            break;
                        }
                        u -= w;
                    }
                    (c.clone(), n)
                })
                .collect()
        }
    }
}

/// Draws `n` attributes, distinct while the vocabulary lasts.
fn draw_attributes(vocab: &[String], n: usize, distinct: bool, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if distinct {
            let mut pool = vocab.to_vec();
            pool.shuffle(rng);
            out.extend(pool.into_iter().take(n - out.len()));
        } else {
            out.push(vocab.choose(rng).unwrap().clone());
        }
    }
    out
}

fn part_box(holder: &BoundingBox) -> BoundingBox {
    let x = holder.x + (0.2 * holder.w).round();
    let y = holder.y + (0.25 * holder.h).round();
    BoundingBox { x, y, w: (0.6 * holder.w).round().max(2.0), h: (0.4 * holder.h).round().max(2.0) }
}

fn generate_image(config: &SynthWorldConfig, index: usize) -> SynthImage {
    let mut rng = image_rng(config.seed, index);
    let (width, height) = config.canvas;
    let image_id = format!("synth-{index:05}");

    let counts = class_counts(config, &mut rng);
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    let side = grid_side(config.max_objects());
    let (cw, ch) = ((width / side as u32) as f64, (height / side as u32) as f64);
    let mut cells: Vec<usize> = (0..side * side).collect();
    cells.shuffle(&mut rng);
    let scale = sample_range(&mut rng, config.scale_range);

    let mut objects = Vec::with_capacity(total * 2);
    let mut cell_iter = cells.into_iter();
    for (class, n) in &counts {
        let is_action = config.action_class.as_deref() == Some(class.as_str());
        let vocab = if is_action { &config.actions } else { &config.colors };
        let attrs = draw_attributes(vocab, *n, config.distinct_attributes, &mut rng);
        let sizes = draw_sizes(config, *n, scale, &mut rng);
        for (attr, (fw, fh)) in attrs.into_iter().zip(sizes) {
            let cell = cell_iter.next().expect("grid holds max_objects");
            let (gx, gy) = ((cell % side) as f64 * cw, (cell / side) as f64 * ch);
            let w = (fw * cw).round().max(4.0);
            let h = (fh * ch).round().max(4.0);
            let x = gx + rng.random_range(0.0..=(cw - w)).floor();
            let y = gy + rng.random_range(0.0..=(ch - h)).floor();
            let bbox = BoundingBox { x, y, w, h };
            let object_id = format!("o{}", objects.len());
            let (color, action) = if is_action { (None, Some(attr)) } else { (Some(attr), None) };
            objects.push(SynthObject { object_id, class: class.clone(), color, action, bbox, part_of: None });
        }
    }
    if let Some(spec) = &config.part {
        let holders: Vec<usize> = (0..objects.len()).filter(|&i| objects[i].class == spec.holder).collect();
        let colors = draw_attributes(&config.colors, holders.len(), config.distinct_attributes, &mut rng);
        for (i, color) in holders.into_iter().zip(colors) {
            let holder = objects[i].clone();
            objects.push(SynthObject {
                object_id: format!("o{}", objects.len()),
                class: spec.part.clone(),
                color: Some(color),
                action: None,
                bbox: part_box(&holder.bbox),
                part_of: Some(holder.object_id),
            });
        }
    }
    SynthImage { image_id, width, height, objects }
}

/// Per-object extents (fractions of a cell), resampled until same-class
/// areas differ by at least `min_area_ratio`.
fn draw_sizes(config: &SynthWorldConfig, n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut best = Vec::new();
    for _ in 0..64 {
        let sizes: Vec<(f64, f64)> =
            (0..n).map(|_| (scale * sample_range(rng, config.size_range), scale * sample_range(rng, config.size_range))).collect();
        let mut areas: Vec<f64> = sizes.iter().map(|(w, h)| w * h).collect();
        areas.sort_by(f64::total_cmp);
        best = sizes;
        if areas.windows(2).all(|w| w[1] >= w[0] * config.min_area_ratio) {
            break;
        }
    }
    best
}

fn feature_row(layout: &FeatureLayout, d: usize, obj: Option<&SynthObject>, bbox: &BoundingBox, canvas: (u32, u32)) -> Vec<f64> {
    let mut f = vec![0.0; d];
    if let Some(o) = obj {
        f[layout.class_col(&o.class).expect("class in layout")] = 1.0;
        if let Some(c) = o.color.as_deref().and_then(|c| layout.color_col(c)) {
            f[c] = 1.0;
        }
        if let Some(a) = o.action.as_deref().and_then(|a| layout.action_col(a)) {
            f[a] = 1.0;
        }
    }
    let g = layout.geometry_cols();
    let (w, h) = (canvas.0 as f64, canvas.1 as f64);
    f[g.start] = bbox.x / w;
    f[g.start + 1] = bbox.y / h;
    f[g.start + 2] = bbox.w / w;
    f[g.start + 3] = bbox.h / h;
    f
}

fn jitter(b: &BoundingBox, canvas: (u32, u32), rng: &mut ChaCha8Rng) -> BoundingBox {
    let (cw, ch) = (canvas.0 as f64, canvas.1 as f64);
    let w = (b.w * rng.random_range(0.85..1.15)).round().clamp(1.0, cw);
    let h = (b.h * rng.random_range(0.85..1.15)).round().clamp(1.0, ch);
    let x = (b.x + b.w * rng.random_range(-0.15..0.15)).round().clamp(0.0, cw - w);
    let y = (b.y + b.h * rng.random_range(-0.15..0.15)).round().clamp(0.0, ch - h);
    BoundingBox { x, y, w, h }
}

fn generate_proposals(config: &SynthWorldConfig, layout: &FeatureLayout, img: &SynthImage, index: usize) -> ProposalSet {
    // separate stream from layout so adding proposals never moves objects
    let mut rng = image_rng(config.seed ^ 0x9e37_79b9_7f4a_7c15, index);
    let canvas = (img.width, img.height);
    let d = config.feature_dim;
    let mut rows: Vec<(BoundingBox, f32, Vec<f64>)> = Vec::new();
    for o in &img.objects {
        rows.push((o.bbox, rng.random_range(0.7f32..1.0), feature_row(layout, d, Some(o), &o.bbox, canvas)));
        for _ in 0..config.jitter_proposals {
            let b = jitter(&o.bbox, canvas, &mut rng);
            rows.push((b, rng.random_range(0.4f32..0.8), feature_row(layout, d, Some(o), &b, canvas)));
        }
    }
    if config.scene_proposal {
        let b = BoundingBox { x: 0.0, y: 0.0, w: img.width as f64, h: img.height as f64 };
        let mut f = feature_row(layout, d, None, &b, canvas);
        f[layout.scene_col()] = 1.0;
        rows.push((b, 0.2, f));
    }
    for _ in 0..config.spurious_proposals {
        let w = rng.random_range(8.0..img.width as f64 / 2.0).round();
        let h = rng.random_range(8.0..img.height as f64 / 2.0).round();
        let x = rng.random_range(0.0..img.width as f64 - w).round();
        let y = rng.random_range(0.0..img.height as f64 - h).round();
        let b = BoundingBox { x, y, w, h };
        rows.push((b, rng.random_range(0.0f32..0.4), feature_row(layout, d, None, &b, canvas)));
    }
    rows.shuffle(&mut rng);
    let normal = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let p = rows.len();
    let mut features = Array2::zeros((p, d));
    for (r, (_, _, f)) in rows.iter().enumerate() {
        for (c, v) in f.iter().enumerate() {
            let eps = if config.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            features[[r, c]] = (v + eps) as f32;
        }
    }
    let (boxes, scores): (Vec<_>, Vec<_>) = rows.into_iter().map(|(b, s, _)| (b, s)).unzip();
    ProposalSet { image_id: img.image_id.clone(), boxes, scores, features }
}

/// Generates the world. Images are generated in parallel from per-image
/// random streams, so the result does not depend on the thread count.
pub fn generate_world(config: &SynthWorldConfig) -> Result<SynthWorld, String> {
    config.validate()?;
    let layout = config.layout();
    let images: Vec<(SynthImage, ProposalSet)> = (0..config.num_images)
        .into_par_iter()
        .map(|i| {
            let img = generate_image(config, i);
            let props = generate_proposals(config, &layout, &img, i);
            (img, props)
        })
        .collect();
    let store = AnnotationStore::from_images(images.iter().map(|(img, _)| img.to_annotation(config.source_questions)));
    let features = FeatureStore::from_sets(images.iter().map(|(_, p)| p.clone())).map_err(|e| e.to_string())?;
    let oracle = SynthOracle { images: images.into_iter().map(|(img, _)| (img.image_id.clone(), img)).collect() };
    Ok(SynthWorld { config: config.clone(), store, features, oracle })
}

impl SynthWorld {
    fn taxonomy(&self) -> AttributeTaxonomy {
        let mut t = AttributeTaxonomy::default();
        for c in &self.config.colors {
            t.category_of.insert(c.clone(), Category::Color);
            t.canonical_of.insert(c.clone(), c.clone());
        }
        for a in &self.config.actions {
            t.category_of.insert(a.clone(), Category::Action);
            t.canonical_of.insert(a.clone(), a.clone());
        }
        t
    }

    /// Instances for one task, with splits assigned per image.
    pub fn task_instances(&self, task: SynthTask) -> Result<Vec<PointQAInstance>, BuildError> {
        match task {
            SynthTask::Local => Ok(build_local_dataset(&self.store, &LocalConfig::new(self.taxonomy(), self.config.seed))?.0),
            SynthTask::Count => self.per_object_task(task, |img, _, point| {
                let answer = self.oracle.answer(&img.image_id, "How many of these are there?", Some(point))?;
                Some(vec![("How many of these are there?".to_string(), answer.clone(), answer)])
            }),
            SynthTask::Comparative => self.per_object_task(task, |img, o, point| {
                let same = img.objects.iter().filter(|x| x.class == o.class).count();
                let mut out = Vec::new();
                if same >= 2 {
                    for word in &self.config.comparative_words {
                        let q = format!("Is this the {word} {}?", o.class);
                        out.push((q.clone(), self.oracle.answer(&img.image_id, &q, Some(point))?, word.clone()));
                    }
                }
                if o.color.is_some() {
                    let q = format!("What color is this {}?", o.class);
                    out.push((q.clone(), self.oracle.answer(&img.image_id, &q, Some(point))?, "color".to_string()));
                }
                Some(out)
            }),
        }
    }

    /// One or more questions per top-level object, pointed at its center.
    /// The closure returns `(question, answer, category)` triples.
    fn per_object_task(
        &self,
        task: SynthTask,
        questions: impl Fn(&SynthImage, &SynthObject, Point) -> Option<Vec<(String, String, String)>>,
    ) -> Result<Vec<PointQAInstance>, BuildError> {
        let ids: Vec<String> = self.oracle.images.keys().cloned().collect();
        let splits = assign_splits(&ids, &THREE_WAY_SPLITS, self.config.seed)?;
        let mut out = Vec::new();
        for img in self.oracle.images.values() {
            for o in img.objects.iter().filter(|o| o.part_of.is_none()) {
                let point = center_point(&o.bbox).expect("generated boxes are valid");
                for (k, (question, answer, category)) in questions(img, o, point).unwrap_or_default().into_iter().enumerate() {
                    let mut meta = InstanceMeta::new(Task::Synthetic);
                    meta.category = Some(category);
                    meta.object_class = Some(o.class.clone());
                    meta.object_id = Some(o.object_id.clone());
                    out.push(PointQAInstance {
                        qa_id: format!("{}-{}-{}-{k}", img.image_id, o.object_id, task.prefix()),
                        image_id: img.image_id.clone(),
                        question,
                        point: Some(point),
                        gt_box: Some(o.bbox),
                        answer,
                        split: splits[&img.image_id],
                        meta,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Pairs sharing a point on a part: a color question about the part and
    /// an action question about its holder.
    pub fn attention_swap_pairs(&self) -> Vec<(PointQAInstance, PointQAInstance)> {
        let Some(spec) = &self.config.part else { return Vec::new() };
        let mut out = Vec::new();
        for img in self.oracle.images.values() {
            for part in img.objects.iter().filter(|o| o.part_of.is_some()) {
                let point = center_point(&part.bbox).expect("valid box");
                let color_q = format!("What color is this {}?", spec.part);
                let action_q = format!("What action is this {} doing?", spec.holder);
                let (Some(color), Some(action)) = (
                    self.oracle.answer(&img.image_id, &color_q, Some(point)),
                    self.oracle.answer(&img.image_id, &action_q, Some(point)),
                ) else {
                    continue;
                };
                let make = |question: String, answer: String, tag: &str| PointQAInstance {
                    qa_id: format!("{}-{}-swap-{tag}", img.image_id, part.object_id),
                    image_id: img.image_id.clone(),
                    question,
                    point: Some(point),
                    gt_box: None,
                    answer,
                    split: Split::Test,
                    meta: InstanceMeta::new(Task::Synthetic),
                };
                out.push((make(color_q, color, "color"), make(action_q, action, "action")));
            }
        }
        out
    }

    /// Writes `annotations.jsonl`, `features/`, `world.json` (config),
    /// `oracle.json`, and `{task}.{split}.jsonl` for every configured task.
    pub fn write(&self, dir: &Path) -> Result<BTreeMap<String, usize>, WorldWriteError> {
        fs::create_dir_all(dir).map_err(|e| WorldWriteError::Io(dir.display().to_string(), e))?;
        self.store.write_jsonl(&dir.join("annotations.jsonl")).map_err(|e| WorldWriteError::Other(e.to_string()))?;
        self.features.write(&dir.join("features"))?;
        for (name, body) in [("world.json", pretty_json(&self.config)), ("oracle.json", pretty_json(&self.oracle))] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| WorldWriteError::Io(path.display().to_string(), e))?;
        }
        let mut counts = BTreeMap::new();
        for task in &self.config.tasks {
            let instances = self.task_instances(*task).map_err(|e| WorldWriteError::Other(e.to_string()))?;
            let splits: &[Split] = match task {
                SynthTask::Local => &[Split::Train, Split::Val, Split::TestDev, Split::TestFinal],
                _ => &[Split::Train, Split::Val, Split::Test],
            };
            crate::dataset::write_split_files(dir, task.prefix(), splits, &instances)
                .map_err(|e| WorldWriteError::Other(e.to_string()))?;
            counts.insert(task.prefix().to_string(), instances.len());
        }
        Ok(counts)
    }
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

#[derive(Debug, thiserror::Error)]
pub enum WorldWriteError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error("{0}")]
    Other(String),
}

/// Plural form used by count templates ("How many cars are there?").
pub fn count_question(class: &str) -> String {
    format!("How many {} are there?", pluralize(class))
}
