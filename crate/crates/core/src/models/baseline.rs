//! Modal-A: pick the most frequent training answer among the answers that
//! are correct somewhere in the image.

use std::collections::BTreeMap;

use crate::dataset::PointQAInstance;

use super::ModelError;

/// Global answer counts over a training split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnswerFrequencies {
    counts: BTreeMap<String, usize>,
}

impl AnswerFrequencies {
    pub fn from_instances<'a>(train: impl IntoIterator<Item = &'a PointQAInstance>) -> Self {
        let mut counts = BTreeMap::new();
        for i in train {
            *counts.entry(i.answer.clone()).or_default() += 1;
        }
        Self { counts }
    }

    pub fn get(&self, answer: &str) -> usize {
        self.counts.get(answer).copied().unwrap_or(0)
    }
}

/// Highest training frequency wins; ties go to the lexicographically
/// smallest answer.
pub fn baseline_modal_answer(instance: &PointQAInstance, freqs: &AnswerFrequencies) -> Result<String, ModelError> {
    let set = instance.meta.answer_set.as_deref().unwrap_or_default();
    set.iter()
        .max_by(|a, b| freqs.get(a).cmp(&freqs.get(b)).then_with(|| b.cmp(a)))
        .cloned()
        .ok_or_else(|| ModelError::Config(format!("instance {} has no answer_set", instance.qa_id)))
}
