//! The benchmark instance schema, split assignment, and JSON Lines I/O.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, Point};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl DatasetError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
        move |source| DatasetError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestDev,
    TestFinal,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestDev => "test_dev",
            Split::TestFinal => "test_final",
            Split::Test => "test",
        }
    }

    pub fn is_eval(&self) -> bool {
        *self != Split::Train
    }

    pub fn parse(s: &str) -> Option<Split> {
        [Split::Train, Split::Val, Split::TestDev, Split::TestFinal, Split::Test]
            .into_iter()
            .find(|x| x.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Local,
    Looktwice,
    General,
    Verbal,
    Spatial,
    /// Synthetic-world tasks that do not follow one of the benchmark builders.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionForm {
    Object,
    Supercategory,
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_form: Option<QuestionForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_set: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesized: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_qa_id: Option<String>,
}

impl InstanceMeta {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            category: None,
            object_class: None,
            object_id: None,
            supercategory: None,
            question_form: None,
            answer_set: None,
            synthesized: None,
            source_qa_id: None,
        }
    }
}

/// One benchmark example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointQAInstance {
    pub qa_id: String,
    pub image_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BoundingBox>,
    pub answer: String,
    pub split: Split,
    pub meta: InstanceMeta,
}

pub const LOCAL_SPLITS: [(Split, f64); 4] =
    [(Split::Train, 0.70), (Split::Val, 0.10), (Split::TestDev, 0.10), (Split::TestFinal, 0.10)];
pub const THREE_WAY_SPLITS: [(Split, f64); 3] = [(Split::Train, 0.8), (Split::Val, 0.1), (Split::Test, 0.1)];

pub fn validate_fractions(fractions: &[(Split, f64)]) -> Result<(), DatasetError> {
    if fractions.is_empty() || fractions.iter().any(|(_, f)| !(0.0..=1.0).contains(f)) {
        return Err(DatasetError::Config("split fractions must lie in [0, 1]".into()));
    }
    let sum: f64 = fractions.iter().map(|(_, f)| f).sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Config(format!("split fractions sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Integer counts per split by largest remainder; each count is within one
/// of `n * fraction`.
pub fn split_counts(n: usize, fractions: &[(Split, f64)]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|(_, f)| n as f64 * f).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let mut rest = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Seeded per-image split assignment.
pub fn assign_splits(
    image_ids: &[String],
    fractions: &[(Split, f64)],
    seed: u64,
) -> Result<BTreeMap<String, Split>, DatasetError> {
    validate_fractions(fractions)?;
    let mut ids: Vec<&String> = image_ids.iter().collect();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let counts = split_counts(ids.len(), fractions);
    let mut out = BTreeMap::new();
    let mut it = ids.into_iter();
    for ((split, _), count) in fractions.iter().zip(counts) {
        for id in it.by_ref().take(count) {
            out.insert(id.clone(), *split);
        }
    }
    Ok(out)
}

pub fn split_file(dir: &Path, prefix: &str, split: Split) -> PathBuf {
    dir.join(format!("{prefix}.{}.jsonl", split.as_str()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(File::create(path).map_err(DatasetError::io(path))?);
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(out, "{line}").map_err(DatasetError::io(path))?;
    }
    out.flush().map_err(DatasetError::io(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(DatasetError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(DatasetError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Writes `{prefix}.{split}.jsonl` for every listed split (empty files
/// included), preserving instance order within each split.
pub fn write_split_files(
    dir: &Path,
    prefix: &str,
    splits: &[Split],
    instances: &[PointQAInstance],
) -> Result<Vec<PathBuf>, DatasetError> {
    std::fs::create_dir_all(dir).map_err(DatasetError::io(dir))?;
    let mut paths = Vec::new();
    for &split in splits {
        let subset: Vec<&PointQAInstance> = instances.iter().filter(|i| i.split == split).collect();
        let path = split_file(dir, prefix, split);
        write_jsonl(&path, &subset)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loads every split file `{prefix}.*.jsonl` that exists in `dir`.
pub fn read_split_files(dir: &Path, prefix: &str) -> Result<Vec<PointQAInstance>, DatasetError> {
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val, Split::TestDev, Split::TestFinal, Split::Test] {
        let path = split_file(dir, prefix, split);
        if path.exists() {
            out.extend(read_jsonl::<PointQAInstance>(&path)?);
        }
    }
    Ok(out)
}
