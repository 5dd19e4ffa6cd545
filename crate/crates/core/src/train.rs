//! Mini-batch training with early stopping on validation accuracy.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Model, ModelError, Sample};
use crate::nn::optim::{scheduled_rate, Optimizer, OptimizerKind};
use crate::nn::{sum_gradients, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Linear warmup then decay (see [`scheduled_rate`]).
    pub schedule: bool,
    /// Iterations without a validation improvement before stopping.
    pub patience: usize,
    pub max_iterations: usize,
    pub batch_size: usize,
    /// Validation is checked every this many iterations.
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adamax,
            learning_rate: 0.002,
            schedule: false,
            patience: 500,
            max_iterations: 10_000,
            batch_size: 64,
            eval_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.max_iterations == 0 {
            return bad("batch_size, eval_interval and max_iterations must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("loss diverged (non-finite) at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("log i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One labeled training or validation example.
#[derive(Debug, Clone)]
pub struct Example {
    pub sample: Sample,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    /// Mean training loss since the previous entry.
    pub loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub best_iteration: usize,
    pub best_val_accuracy: f64,
    pub iterations_run: usize,
    pub stopped_early: bool,
    pub log: Vec<LogEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation score. Only a strict improvement resets the
/// patience window, so the earliest best checkpoint is kept.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn observe(&mut self, iteration: usize, accuracy: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if accuracy <= b => {
                let (at, _) = self.best.unwrap();
                if iteration - at >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((iteration, accuracy));
                StopDecision::Improved
            }
        }
    }
}

/// Examples per gradient chunk. Chunks are summed in order, so results do
/// not depend on the number of worker threads.
const CHUNK: usize = 8;

fn batch_gradients(model: &Model, batch: &[&Example]) -> Result<(f64, Vec<Option<Mat>>), ModelError> {
    let partials: Vec<Result<(f64, Vec<Option<Mat>>), ModelError>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Vec::new();
            let mut loss = 0.0;
            for ex in chunk {
                let (l, g) = model.loss_and_gradients(&ex.sample, ex.answer)?;
                loss += l;
                sum_gradients(&mut acc, g);
            }
            Ok((loss, acc))
        })
        .collect();
    let mut total = Vec::new();
    let mut loss = 0.0;
    for p in partials {
        let (l, g) = p?;
        loss += l;
        for (i, m) in g.into_iter().enumerate() {
            if total.len() <= i {
                total.resize(i + 1, None);
            }
            match (&mut total[i], m) {
                (Some(t), Some(m)) => *t += &m,
                (slot @ None, Some(m)) => *slot = Some(m),
                _ => {}
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for m in total.iter_mut().flatten() {
        *m *= scale;
    }
    Ok((loss * scale, total))
}

/// Fraction of examples whose argmax equals the label.
pub fn accuracy(model: &Model, examples: &[Example]) -> Result<f64, ModelError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<Result<bool, ModelError>> =
        examples.par_iter().map(|ex| model.predict(&ex.sample).map(|(d, _)| d.argmax() == ex.answer)).collect();
    let mut n = 0;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / examples.len() as f64)
}

/// Trains in place and leaves the best-validation weights in `model`.
///
/// `on_log` sees every log entry as it is produced.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Contract("train and val sets must be non-empty".into()));
    }
    let n_answers = model.config.answers.len();
    if let Some(ex) = train_set.iter().chain(val_set).find(|e| e.answer >= n_answers) {
        return Err(TrainError::Contract(format!("answer index {} outside the model's vocabulary of {n_answers}", ex.answer)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut optimizer = Optimizer::new(config.optimizer, &model.params);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_params = model.params.clone();
    let mut log = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0);
    let mut stopped_early = false;
    let mut iteration = 0;

    while iteration < config.max_iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(train_set.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradients(model, &batch)?;
        iteration += 1;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { iteration });
        }
        let lr = scheduled_rate(config.learning_rate, iteration - 1, config.max_iterations, config.schedule);
        optimizer.step(&mut model.params, &grads, lr);
        loss_sum += loss;
        loss_n += 1;

        if iteration % config.eval_interval == 0 || iteration == config.max_iterations {
            let val_accuracy = accuracy(model, val_set)?;
            let entry = LogEntry { iteration, loss: loss_sum / loss_n as f64, val_accuracy };
            on_log(&entry);
            log.push(entry);
            loss_sum = 0.0;
            loss_n = 0;
            match stopper.observe(iteration, val_accuracy) {
                StopDecision::Improved => best_params = model.params.clone(),
                StopDecision::Continue => {}
                StopDecision::Stop => {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    model.params = best_params;
    let (best_iteration, best_val_accuracy) = stopper.best().expect("at least one evaluation ran");
    Ok(TrainOutcome { best_iteration, best_val_accuracy, iterations_run: iteration, stopped_early, log })
}

pub fn write_log(path: &Path, log: &[LogEntry]) -> Result<(), std::io::Error> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in log {
        writeln!(f, "{}", serde_json::to_string(e).expect("log entry serializes"))?;
    }
    f.flush()
}
