//! Dataset builders. Each turns an [`AnnotationStore`](crate::store::AnnotationStore)
//! into a list of [`PointQAInstance`](crate::dataset::PointQAInstance)s plus a
//! [`BuildReport`] of counts and skip reasons.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, PointQAInstance};

pub mod general;
pub mod local;
pub mod looktwice;
pub mod verbal_spatial;

pub use general::{build_general_dataset, transform_which_question, GeneralConfig};
pub use local::{build_local_dataset, find_local_pairs, LocalConfig, LocalPair};
pub use looktwice::{
    bin_count_answer, build_looktwice_dataset, count_instances, extract_count_subject, generalize_question,
    match_subject_to_region, CountAnswer, LookTwiceConfig, Supercategory, SupercategoryMap,
};
pub use verbal_spatial::{build_dv_ds, detect_verbal_disambiguation, VerbalSpatialConfig};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Result of one constraint check over a built dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub checked: usize,
    pub violations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub examples: Vec<String>,
}

impl CheckResult {
    pub fn new(name: &str) -> Self {
        Self { name: name.into(), passed: true, checked: 0, violations: 0, examples: Vec::new() }
    }

    pub fn record(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.violations += 1;
            self.passed = false;
            if self.examples.len() < 5 {
                self.examples.push(describe());
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCount {
    pub images: usize,
    pub instances: usize,
}

/// Counts, skip reasons, and constraint results written as `report.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub task: String,
    pub seed: u64,
    pub images_total: usize,
    pub instances: usize,
    pub splits: BTreeMap<String, SplitCount>,
    pub skipped: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub breakdown: BTreeMap<String, usize>,
    #[serde(default)]
    pub checks: Vec<CheckResult>,
}

impl BuildReport {
    pub(crate) fn new(task: &str, seed: u64, images_total: usize) -> Self {
        Self { task: task.into(), seed, images_total, ..Default::default() }
    }

    pub(crate) fn skip(&mut self, reason: &str, n: usize) {
        if n > 0 {
            *self.skipped.entry(reason.into()).or_default() += n;
        }
    }

    pub(crate) fn tally(&mut self, instances: &[PointQAInstance]) {
        self.instances = instances.len();
        self.splits.clear();
        let mut images: BTreeMap<&str, std::collections::BTreeSet<&str>> = BTreeMap::new();
        for inst in instances {
            self.splits.entry(inst.split.as_str().into()).or_default().instances += 1;
            images.entry(inst.split.as_str()).or_default().insert(&inst.image_id);
        }
        for (split, ids) in images {
            self.splits.entry(split.into()).or_default().images = ids.len();
        }
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Independent, reproducible random stream for the `index`-th image.
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}
