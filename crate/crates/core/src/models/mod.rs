//! Point-conditioned answer models.
//!
//! Four architectures share one interface: a [`Model`] owns its
//! [`ParamStore`] and maps a [`Sample`] (question tokens plus point and/or
//! image regions) to an [`AnswerDistribution`] and an [`AttentionRecord`].
//!
//! Region rows are the raw proposal features followed by six extra
//! columns: normalized `x, y, w, h`, relative area, and a point-stream
//! indicator used when image and point regions share one stream.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::SelectedRegions;
use crate::geometry::BoundingBox;
use crate::nn::graph::softmax_row;
use crate::nn::{Gradients, Graph, Mat, ParamStore, Var};
use crate::text::tokenize;

pub mod baseline;
pub mod lxmert;
pub mod mcan;
pub mod pythia;

pub use baseline::{baseline_modal_answer, AnswerFrequencies};

/// Extra columns appended to every region row.
pub const GEOMETRY_COLS: usize = 6;

/// Transformer input embedding for region rows: appearance and box
/// geometry are projected and normalized separately, then averaged, so the
/// small geometry columns are not drowned out by the feature columns.
pub(crate) struct RegionEmbedding {
    features: crate::nn::layers::Linear,
    features_ln: crate::nn::layers::LayerNorm,
    geometry: crate::nn::layers::Linear,
    geometry_ln: crate::nn::layers::LayerNorm,
    region_dim: usize,
}

impl RegionEmbedding {
    pub(crate) fn new(store: &mut crate::nn::ParamStore, name: &str, c: &ModelConfig) -> Self {
        use crate::nn::layers::{LayerNorm, Linear};
        Self {
            features: Linear::new(store, &format!("{name}.feat"), c.region_dim, c.d),
            features_ln: LayerNorm::new(store, &format!("{name}.feat_ln"), c.d),
            geometry: Linear::new(store, &format!("{name}.geom"), GEOMETRY_COLS, c.d),
            geometry_ln: LayerNorm::new(store, &format!("{name}.geom_ln"), c.d),
            region_dim: c.region_dim,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, rows: crate::nn::Var) -> crate::nn::Var {
        let f = g.slice_cols(rows, 0, self.region_dim);
        let f = self.features.forward(g, f);
        let f = self.features_ln.forward(g, f);
        let p = g.slice_cols(rows, self.region_dim, self.region_dim + GEOMETRY_COLS);
        let p = self.geometry.forward(g, p);
        let p = self.geometry_ln.forward(g, p);
        let sum = g.add(f, p);
        g.scale(sum, 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    PythiaLocal,
    PythiaGlobal,
    Mcan,
    Lxmert,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [Self::PythiaLocal, Self::PythiaGlobal, Self::Mcan, Self::Lxmert];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PythiaLocal => "pythia_local",
            Self::PythiaGlobal => "pythia_global",
            Self::Mcan => "mcan",
            Self::Lxmert => "lxmert",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which inputs a model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Streams {
    QOnly,
    ImageQ,
    PointQ,
    /// Image and point regions concatenated into one visual stream.
    TwoStream,
    /// Separate question, image and point streams.
    ThreeStream,
}

impl Streams {
    pub const ALL: [Streams; 5] = [Self::QOnly, Self::ImageQ, Self::PointQ, Self::TwoStream, Self::ThreeStream];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::QOnly => "q_only",
            Self::ImageQ => "image_q",
            Self::PointQ => "point_q",
            Self::TwoStream => "two_stream",
            Self::ThreeStream => "three_stream",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }

    pub fn uses_point(self) -> bool {
        matches!(self, Self::PointQ | Self::TwoStream | Self::ThreeStream)
    }

    pub fn uses_image(self) -> bool {
        matches!(self, Self::ImageQ | Self::TwoStream | Self::ThreeStream)
    }
}

impl fmt::Display for Streams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub streams: Streams,
    /// Hidden width.
    pub d: usize,
    pub heads: usize,
    /// MCAN encoder/decoder depth.
    pub layers: usize,
    pub n_l: usize,
    pub n_img: usize,
    pub n_pt: usize,
    pub n_x: usize,
    /// Raw proposal feature width `D` (before the geometry columns).
    pub region_dim: usize,
    pub answers: Vec<String>,
    pub vocab: Vec<String>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, streams: Streams, region_dim: usize, vocab: Vocabulary, answers: Vec<String>) -> Self {
        Self {
            architecture,
            streams,
            d: 256,
            heads: 4,
            layers: 2,
            n_l: 5,
            n_img: 3,
            n_pt: 3,
            n_x: 3,
            region_dim,
            answers,
            vocab: vocab.tokens,
            seed: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.region_dim + GEOMETRY_COLS
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide d {}", self.heads, self.d));
        }
        if [self.layers, self.n_l, self.n_img, self.n_pt, self.n_x].contains(&0) {
            return bad("layer counts must be at least 1".into());
        }
        if self.answers.len() < 2 {
            return bad("answer vocabulary needs at least two answers".into());
        }
        if self.region_dim == 0 {
            return bad("region_dim must be positive".into());
        }
        match self.architecture {
            Architecture::PythiaLocal if matches!(self.streams, Streams::TwoStream | Streams::ThreeStream) => {
                bad(format!("pythia_local does not support {}", self.streams))
            }
            Architecture::PythiaGlobal if self.streams != Streams::ThreeStream => {
                bad("pythia_global always uses question, image and point inputs (streams = three_stream)".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("question has no tokens")]
    EmptyQuestion,
    #[error("model needs the {0} stream but the sample has none")]
    MissingStream(&'static str),
    #[error("every row of the {0} stream is masked")]
    FullyMasked(&'static str),
    #[error("region rows have width {got}, model expects {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("answer {0:?} is not in the model's answer vocabulary")]
    UnknownAnswer(String),
}

/// Question token vocabulary. Index 0 is `<unk>`, 1 is `<cls>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

pub const UNK: usize = 0;
pub const CLS: usize = 1;

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Sorted token set of the given questions, after the reserved entries.
    pub fn build<'a>(questions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for q in questions {
            set.extend(tokenize(q));
        }
        let mut tokens = vec!["<unk>".to_string(), "<cls>".to_string()];
        tokens.extend(set.into_iter().filter(|t| t != "<unk>" && t != "<cls>"));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token ids with out-of-vocabulary words mapped to `<unk>`.
    pub fn encode(&self, question: &str) -> Result<Vec<usize>, ModelError> {
        let ids: Vec<usize> = tokenize(question).iter().map(|t| self.index.get(t).copied().unwrap_or(UNK)).collect();
        if ids.is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        Ok(ids)
    }
}

/// Region rows for one stream: `N × (D + 6)` plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Regions {
    pub rows: Mat,
    pub mask: Arc<[bool]>,
    pub boxes: Vec<BoundingBox>,
}

impl Regions {
    /// Appends normalized geometry to selected proposal features. Padding
    /// rows stay exactly zero.
    pub fn from_selection(sel: &SelectedRegions, width: u32, height: u32) -> Self {
        let (n, d) = sel.features.dim();
        let mut rows = Array2::zeros((n, d + GEOMETRY_COLS));
        rows.slice_mut(s![.., ..d]).assign(&sel.features);
        let (w, h) = (width as f64, height as f64);
        for (r, (b, m)) in sel.boxes.iter().zip(&sel.mask).enumerate() {
            if *m {
                let g = [b.x / w, b.y / h, b.w / w, b.h / h, b.area() / (w * h)];
                for (k, v) in g.into_iter().enumerate() {
                    rows[[r, d + k]] = v;
                }
            }
        }
        Self { rows, mask: Arc::from(sel.mask.clone()), boxes: sel.boxes.clone() }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    fn check(&self, name: &'static str, width: usize) -> Result<(), ModelError> {
        if self.rows.ncols() != width {
            return Err(ModelError::WidthMismatch { expected: width, got: self.rows.ncols() });
        }
        if self.valid_count() == 0 {
            return Err(ModelError::FullyMasked(name));
        }
        Ok(())
    }

    /// Valid rows only, with their original indices. Every model is
    /// padding invariant, so dropping padding only saves work.
    fn compact(&self) -> (Regions, Vec<usize>) {
        let keep: Vec<usize> = (0..self.mask.len()).filter(|&i| self.mask[i]).collect();
        let rows = self.rows.select(ndarray::Axis(0), &keep);
        let boxes = keep.iter().map(|&i| self.boxes[i]).collect();
        (Regions { rows, mask: Arc::from(vec![true; keep.len()]), boxes }, keep)
    }

    /// Sets the indicator column (last) on every valid row.
    fn with_indicator(&self, value: f64) -> Self {
        let mut out = self.clone();
        let c = out.rows.ncols() - 1;
        for (r, m) in self.mask.iter().enumerate() {
            if *m {
                out.rows[[r, c]] = value;
            }
        }
        out
    }

    /// Image rows followed by point rows, with the indicator set on the
    /// point rows.
    pub fn concat(image: &Regions, point: &Regions) -> Regions {
        let a = image.with_indicator(0.0);
        let b = point.with_indicator(1.0);
        let rows = ndarray::concatenate(ndarray::Axis(0), &[a.rows.view(), b.rows.view()]).expect("equal widths");
        let mask: Vec<bool> = a.mask.iter().chain(b.mask.iter()).copied().collect();
        let boxes = a.boxes.iter().chain(&b.boxes).copied().collect();
        Regions { rows, mask: Arc::from(mask), boxes }
    }
}

/// One model input.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub point: Option<Regions>,
    pub image: Option<Regions>,
}

/// Probability per answer label; sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub labels: Vec<String>,
    pub probs: Vec<f64>,
}

impl AnswerDistribution {
    pub fn argmax(&self) -> usize {
        // first maximum wins, so ties resolve deterministically
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn top(&self) -> &str {
        &self.labels[self.argmax()]
    }

    pub fn as_map(&self) -> BTreeMap<&str, f64> {
        self.labels.iter().map(String::as_str).zip(self.probs.iter().copied()).collect()
    }
}

/// Attention weights exposed for analysis and overlays. Every vector is
/// non-negative, sums to one over valid entries, and is exactly zero on
/// padding.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    /// Weights over the point stream (or the single visual stream).
    pub local: Vec<f64>,
    /// Weights over all proposals, for models with a global stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<Vec<f64>>,
    /// Head-averaged weight matrices per layer, for transformer variants.
    /// These cover valid rows only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_layer: Option<Vec<Vec<Vec<f64>>>>,
}

pub(crate) fn matrix_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Renormalizes `w[range]` to sum to one (used to split concatenated
/// streams back apart).
pub(crate) fn renormalized(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter().map(|v| v / total).collect()
    } else {
        w.to_vec()
    }
}

pub(crate) struct Forward {
    pub logits: Var,
    pub attention: AttentionRecord,
}

pub(crate) enum Net {
    Pythia(pythia::Pythia),
    Mcan(mcan::Mcan),
    Lxmert(lxmert::Lxmert),
}

/// A configured network with its weights.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    net: Net,
    vocab: Vocabulary,
    answer_index: HashMap<String, usize>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new(config.seed);
        let net = match config.architecture {
            Architecture::PythiaLocal | Architecture::PythiaGlobal => Net::Pythia(pythia::Pythia::new(&mut params, &config)),
            Architecture::Mcan => Net::Mcan(mcan::Mcan::new(&mut params, &config)),
            Architecture::Lxmert => Net::Lxmert(lxmert::Lxmert::new(&mut params, &config)),
        };
        let vocab = Vocabulary::from_tokens(config.vocab.clone());
        let answer_index = config.answers.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Ok(Self { config, params, net, vocab, answer_index })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn answer_id(&self, answer: &str) -> Option<usize> {
        self.answer_index.get(answer).copied()
    }

    /// Checks the sample against the streams this model consumes.
    pub fn check_sample(&self, s: &Sample) -> Result<(), ModelError> {
        if s.tokens.is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        let width = self.config.input_dim();
        if self.needs_point() {
            s.point.as_ref().ok_or(ModelError::MissingStream("point"))?.check("point", width)?;
        }
        if self.needs_image() {
            s.image.as_ref().ok_or(ModelError::MissingStream("image"))?.check("image", width)?;
        }
        Ok(())
    }

    /// Pythia-local reads its single visual stream from `point` regardless
    /// of strategy; image-only ablations read `image`.
    pub fn needs_point(&self) -> bool {
        match self.config.architecture {
            Architecture::PythiaLocal => self.config.streams != Streams::QOnly && self.config.streams != Streams::ImageQ,
            Architecture::PythiaGlobal => true,
            _ => self.config.streams.uses_point(),
        }
    }

    pub fn needs_image(&self) -> bool {
        match self.config.architecture {
            Architecture::PythiaLocal => self.config.streams == Streams::ImageQ,
            Architecture::PythiaGlobal => true,
            _ => self.config.streams.uses_image(),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, s: &Sample) -> Result<Forward, ModelError> {
        self.check_sample(s)?;
        let point = s.point.as_ref().map(Regions::compact);
        let image = s.image.as_ref().map(Regions::compact);
        let compact = Sample {
            tokens: s.tokens.clone(),
            point: point.as_ref().map(|p| p.0.clone()),
            image: image.as_ref().map(|p| p.0.clone()),
        };
        let mut f = match &self.net {
            Net::Pythia(n) => n.forward(g, &compact),
            Net::Mcan(n) => n.forward(g, &compact),
            Net::Lxmert(n) => n.forward(g, &compact),
        };
        // scatter weights back to the caller's padded layout
        let expand = |w: &[f64], idx: &[usize], n: usize| {
            let mut out = vec![0.0; n];
            for (&i, &v) in idx.iter().zip(w) {
                out[i] = v;
            }
            out
        };
        let (local_full, local_idx) = if self.needs_point() { (&s.point, &point) } else { (&s.image, &image) };
        if let (Some(full), Some((_, idx))) = (local_full, local_idx) {
            if !f.attention.local.is_empty() {
                f.attention.local = expand(&f.attention.local, idx, full.mask.len());
            }
        }
        if let (Some(w), Some(full), Some((_, idx))) = (&f.attention.global, &s.image, &image) {
            f.attention.global = Some(expand(w, idx, full.mask.len()));
        }
        Ok(f)
    }

    pub fn predict(&self, s: &Sample) -> Result<(AnswerDistribution, AttentionRecord), ModelError> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, s)?;
        let probs = softmax_row(g.value(f.logits)).row(0).to_vec();
        Ok((AnswerDistribution { labels: self.config.answers.clone(), probs }, f.attention))
    }

    /// Cross-entropy loss and parameter gradients for one labeled sample.
    pub fn loss_and_gradients(&self, s: &Sample, answer: usize) -> Result<(f64, Gradients), ModelError> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, s)?;
        let loss = g.cross_entropy(f.logits, answer);
        Ok((g.value(loss)[[0, 0]], g.backward(loss)))
    }
}

/// Fixed sinusoidal position encodings, `len × d`.
pub(crate) fn positional(len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((len, d), |(p, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = p as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
pub(crate) mod testutil;
