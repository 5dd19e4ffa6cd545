//! Accuracy reports with per-cell counts.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PointQAInstance, QuestionForm};
use crate::inputs::{InputBuilder, InputError};
use crate::models::baseline::{baseline_modal_answer, AnswerFrequencies};
use crate::models::{AttentionRecord, Model, ModelError, Sample};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty dataset")]
    Empty,
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("instance {qa_id}: {source}")]
    Model {
        qa_id: String,
        #[source]
        source: ModelError,
    },
}

/// What a predictor says about one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub answer: String,
    pub attention: Option<AttentionSummary>,
    pub fallback: bool,
}

impl Prediction {
    pub fn answer(answer: impl Into<String>) -> Self {
        Self { answer: answer.into(), attention: None, fallback: false }
    }
}

/// Peak attention of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub max_local: f64,
    /// Pixel area of the region holding `max_local`.
    pub max_local_area: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_global: Option<f64>,
}

impl AttentionSummary {
    /// Local weights align with the point stream, or with the image stream
    /// for models that see only the image.
    pub fn from_record(record: &AttentionRecord, sample: &Sample) -> Option<Self> {
        let regions = sample.point.as_ref().or(sample.image.as_ref())?;
        let (idx, &max_local) = record.local.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
        let max_global = record.global.as_ref().and_then(|g| g.iter().copied().max_by(f64::total_cmp));
        Some(Self { max_local, max_local_area: regions.boxes[idx].area(), max_global })
    }
}

pub trait Predictor: Sync {
    fn predict(&self, instance: &PointQAInstance) -> Result<Prediction, EvalError>;
}

/// Any `Fn(&PointQAInstance) -> String` is a predictor.
impl<F> Predictor for F
where
    F: Fn(&PointQAInstance) -> String + Sync,
{
    fn predict(&self, instance: &PointQAInstance) -> Result<Prediction, EvalError> {
        Ok(Prediction::answer(self(instance)))
    }
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub inputs: InputBuilder<'a>,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, instance: &PointQAInstance) -> Result<Prediction, EvalError> {
        let prepared = self.inputs.build(self.model, instance)?;
        let (dist, record) = self
            .model
            .predict(&prepared.sample)
            .map_err(|source| EvalError::Model { qa_id: instance.qa_id.clone(), source })?;
        Ok(Prediction {
            answer: dist.labels[dist.argmax()].clone(),
            attention: AttentionSummary::from_record(&record, &prepared.sample),
            fallback: prepared.fallback,
        })
    }
}

/// The Modal-A oracle baseline.
pub struct ModalA {
    pub frequencies: AnswerFrequencies,
}

impl Predictor for ModalA {
    fn predict(&self, instance: &PointQAInstance) -> Result<Prediction, EvalError> {
        baseline_modal_answer(instance, &self.frequencies)
            .map(Prediction::answer)
            .map_err(|source| EvalError::Model { qa_id: instance.qa_id.clone(), source })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Cell {
    fn add(&mut self, correct: bool) {
        self.correct += usize::from(correct);
        self.total += 1;
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub qa_id: String,
    pub image_id: String,
    pub question: String,
    pub label: String,
    pub predicted: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionSummary>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// Predictions that carried attention.
    pub count: usize,
    pub mean_max_local: Option<f64>,
    pub mean_max_global: Option<f64>,
    pub median_max_local_area: Option<f64>,
}

impl AttentionStats {
    pub fn from_summaries<'a>(summaries: impl IntoIterator<Item = &'a AttentionSummary>) -> Self {
        let summaries: Vec<_> = summaries.into_iter().collect();
        if summaries.is_empty() {
            return Self::default();
        }
        let n = summaries.len() as f64;
        let globals: Vec<f64> = summaries.iter().filter_map(|s| s.max_global).collect();
        let areas: Vec<f64> = summaries.iter().map(|s| s.max_local_area).collect();
        Self {
            count: summaries.len(),
            mean_max_local: Some(summaries.iter().map(|s| s.max_local).sum::<f64>() / n),
            mean_max_global: (!globals.is_empty()).then(|| globals.iter().sum::<f64>() / globals.len() as f64),
            median_max_local_area: median(areas),
        }
    }
}

/// Midpoint median; `None` for an empty input.
pub fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 { xs[m] } else { (xs[m - 1] + xs[m]) / 2.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Free-form name of the evaluated configuration.
    pub label: String,
    pub overall: Cell,
    pub by_category: BTreeMap<String, Cell>,
    pub by_answer: BTreeMap<String, Cell>,
    pub by_form: BTreeMap<String, Cell>,
    /// Cells for instances whose label is "yes" or "no".
    pub yes_no: BTreeMap<String, Cell>,
    pub attention: AttentionStats,
    /// Instances whose point matched no proposal.
    pub fallbacks: usize,
    pub predictions: Vec<PredictionRecord>,
}

fn form_name(f: QuestionForm) -> &'static str {
    match f {
        QuestionForm::Object => "object",
        QuestionForm::Supercategory => "supercategory",
        QuestionForm::Generic => "generic",
    }
}

/// Scores `predictor` on every instance. Work is sharded with rayon and
/// merged in input order.
pub fn evaluate(predictor: &dyn Predictor, instances: &[PointQAInstance], label: &str) -> Result<EvalReport, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::Empty);
    }
    let predictions: Vec<Prediction> = instances.par_iter().map(|i| predictor.predict(i)).collect::<Result<_, _>>()?;
    let mut report = EvalReport {
        label: label.to_string(),
        overall: Cell::default(),
        by_category: BTreeMap::new(),
        by_answer: BTreeMap::new(),
        by_form: BTreeMap::new(),
        yes_no: BTreeMap::new(),
        attention: AttentionStats::default(),
        fallbacks: 0,
        predictions: Vec::with_capacity(instances.len()),
    };
    for (inst, pred) in instances.iter().zip(predictions) {
        let ok = pred.answer == inst.answer;
        report.overall.add(ok);
        if let Some(c) = &inst.meta.category {
            report.by_category.entry(c.clone()).or_default().add(ok);
        }
        report.by_answer.entry(inst.answer.clone()).or_default().add(ok);
        if let Some(f) = inst.meta.question_form {
            report.by_form.entry(form_name(f).to_string()).or_default().add(ok);
        }
        if inst.answer == "yes" || inst.answer == "no" {
            report.yes_no.entry(inst.answer.clone()).or_default().add(ok);
        }
        report.fallbacks += usize::from(pred.fallback);
        report.predictions.push(PredictionRecord {
            qa_id: inst.qa_id.clone(),
            image_id: inst.image_id.clone(),
            question: inst.question.clone(),
            label: inst.answer.clone(),
            predicted: pred.answer,
            correct: ok,
            attention: pred.attention,
        });
    }
    report.attention = AttentionStats::from_summaries(report.predictions.iter().filter_map(|p| p.attention.as_ref()));
    Ok(report)
}

impl EvalReport {
    /// Pools cells whose answer label is in `labels` (e.g. count bins ≥ 2).
    pub fn answers_cell(&self, labels: &[&str]) -> Cell {
        let mut c = Cell::default();
        for p in self.predictions.iter().filter(|p| labels.contains(&p.label.as_str())) {
            c.add(p.correct);
        }
        c
    }
}
