//! Glue from datasets to trained, evaluated models.

use std::collections::BTreeSet;

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{PointQAInstance, Split};
use crate::eval::{evaluate, EvalError, EvalReport, ModelPredictor};
use crate::features::Strategy;
use crate::inputs::{Disambiguation, InputBuilder, InputError};
use crate::models::{Architecture, Model, ModelConfig, ModelError, Streams, Vocabulary};
use crate::train::{train, Example, LogEntry, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no {0} instances")]
    MissingSplit(&'static str),
    #[error("instance {qa_id}: answer {answer:?} is not in the model's answer vocabulary")]
    UnknownAnswer { qa_id: String, answer: String },
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Train / val / eval partition of one task.
#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<PointQAInstance>,
    pub val: Vec<PointQAInstance>,
    /// Every held-out split other than val.
    pub test: Vec<PointQAInstance>,
}

impl Splits {
    pub fn from_instances(instances: impl IntoIterator<Item = PointQAInstance>) -> Self {
        let mut s = Self::default();
        for i in instances {
            match i.split {
                Split::Train => s.train.push(i),
                Split::Val => s.val.push(i),
                _ => s.test.push(i),
            }
        }
        s
    }

    pub fn all(&self) -> impl Iterator<Item = &PointQAInstance> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Sorted answer labels over every split.
    pub fn answers(&self) -> Vec<String> {
        self.all().map(|i| i.answer.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Question vocabulary from the training split only.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(self.train.iter().map(|i| i.question.as_str()))
    }

    /// A model config sized for these splits with the paper-scale defaults.
    pub fn model_config(&self, architecture: Architecture, streams: Streams, region_dim: usize) -> ModelConfig {
        ModelConfig::new(architecture, streams, region_dim, self.vocabulary(), self.answers())
    }
}

/// Prepares labeled examples in input order.
pub fn examples(model: &Model, inputs: &InputBuilder, instances: &[PointQAInstance]) -> Result<Vec<Example>, PipelineError> {
    instances
        .par_iter()
        .map(|i| {
            let answer = model
                .answer_id(&i.answer)
                .ok_or_else(|| PipelineError::UnknownAnswer { qa_id: i.qa_id.clone(), answer: i.answer.clone() })?;
            Ok(Example { sample: inputs.build(model, i)?.sample, answer })
        })
        .collect()
}

/// Builds a model from `config`, trains it on `splits.train` with early
/// stopping on `splits.val`, and returns it with the outcome.
pub fn fit(
    config: ModelConfig,
    inputs: &InputBuilder,
    splits: &Splits,
    train_config: &TrainConfig,
    on_log: impl FnMut(&LogEntry),
) -> Result<(Model, TrainOutcome), PipelineError> {
    if splits.train.is_empty() {
        return Err(PipelineError::MissingSplit("train"));
    }
    if splits.val.is_empty() {
        return Err(PipelineError::MissingSplit("val"));
    }
    let mut model = Model::new(config)?;
    let train_set = examples(&model, inputs, &splits.train)?;
    let val_set = examples(&model, inputs, &splits.val)?;
    let outcome = train(&mut model, &train_set, &val_set, train_config, on_log)?;
    Ok((model, outcome))
}

/// Evaluates with the given disambiguation column.
pub fn score(
    model: &Model,
    inputs: &InputBuilder,
    disambiguation: Disambiguation,
    instances: &[PointQAInstance],
    label: &str,
) -> Result<EvalReport, PipelineError> {
    let predictor = ModelPredictor { model, inputs: inputs.with_disambiguation(disambiguation) };
    Ok(evaluate(&predictor, instances, label)?)
}

/// Strategy name used for the point stream in report labels.
pub fn strategy_label(architecture: Architecture, streams: Streams, strategy: Strategy) -> String {
    format!("{}/{}/{}", architecture.as_str(), streams.as_str(), strategy.as_str())
}
