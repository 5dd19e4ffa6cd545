//! Attention and context-word analyses over evaluation output.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PointQAInstance;
use crate::eval::{median, EvalError, EvalReport, Predictor};
use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("reports cover different instances")]
    DifferentDatasets,
    #[error("prediction for {0} carries no attention")]
    NoAttention(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Paired change in the area of the most-attended region when one question
/// is swapped for another at the same point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapAnalysis {
    pub pairs: usize,
    pub median_area_before: f64,
    pub median_area_after: f64,
    pub median_change: f64,
    pub increases: usize,
    pub decreases: usize,
    pub ties: usize,
    /// One-sided sign test for "area increases"; ties are dropped.
    pub p_value: f64,
}

/// `P(X ≥ k)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    // ln C(n, i) built up term by term, then summed in log space
    let ln_half_n = n as f64 * std::f64::consts::LN_2;
    let mut ln_c = 0.0;
    let mut terms = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= k {
            terms.push(ln_c - ln_half_n);
        }
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()).exp().min(1.0)
}

pub fn attention_swap(
    predictor: &dyn Predictor,
    pairs: &[(PointQAInstance, PointQAInstance)],
) -> Result<SwapAnalysis, AnalysisError> {
    use rayon::prelude::*;
    let areas: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(a, b)| {
            let area = |i: &PointQAInstance| -> Result<f64, AnalysisError> {
                predictor
                    .predict(i)?
                    .attention
                    .map(|s| s.max_local_area)
                    .ok_or_else(|| AnalysisError::NoAttention(i.qa_id.clone()))
            };
            Ok((area(a)?, area(b)?))
        })
        .collect::<Result<_, AnalysisError>>()?;
    let (mut up, mut down, mut ties) = (0, 0, 0);
    for (a, b) in &areas {
        match b.partial_cmp(a) {
            Some(std::cmp::Ordering::Greater) => up += 1,
            Some(std::cmp::Ordering::Less) => down += 1,
            _ => ties += 1,
        }
    }
    Ok(SwapAnalysis {
        pairs: areas.len(),
        median_area_before: median(areas.iter().map(|p| p.0).collect()).unwrap_or(0.0),
        median_area_after: median(areas.iter().map(|p| p.1).collect()).unwrap_or(0.0),
        median_change: median(areas.iter().map(|p| p.1 - p.0).collect()).unwrap_or(0.0),
        increases: up,
        decreases: down,
        ties,
        p_value: sign_test_p(up, up + down),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordDelta {
    pub word: String,
    pub count: usize,
    pub accuracy_a: Option<f64>,
    pub accuracy_b: Option<f64>,
    /// `accuracy_a - accuracy_b`; null when no question has the word.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextWordReport {
    pub overall_delta: f64,
    pub words: Vec<WordDelta>,
}

/// Per-word accuracy of `a` minus `b`, over questions containing the word
/// as a token.
pub fn context_word_analysis(a: &EvalReport, b: &EvalReport, words: &[&str]) -> Result<ContextWordReport, AnalysisError> {
    let same = a.predictions.len() == b.predictions.len()
        && a.predictions.iter().zip(&b.predictions).all(|(x, y)| x.qa_id == y.qa_id);
    if !same {
        return Err(AnalysisError::DifferentDatasets);
    }
    let tokens: Vec<BTreeSet<String>> = a.predictions.iter().map(|p| tokenize(&p.question).into_iter().collect()).collect();
    let words = words
        .iter()
        .map(|w| {
            let w = w.to_lowercase();
            let hits: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i].contains(&w)).collect();
            let acc = |r: &EvalReport| {
                (!hits.is_empty()).then(|| hits.iter().filter(|&&i| r.predictions[i].correct).count() as f64 / hits.len() as f64)
            };
            let (x, y) = (acc(a), acc(b));
            WordDelta { word: w, count: hits.len(), accuracy_a: x, accuracy_b: y, delta: x.zip(y).map(|(x, y)| x - y) }
        })
        .collect();
    Ok(ContextWordReport { overall_delta: a.overall.accuracy - b.overall.accuracy, words })
}
