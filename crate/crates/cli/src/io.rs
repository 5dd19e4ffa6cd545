use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pointqa::features::FeatureStore;
use pointqa::store::load_annotations;
use pointqa::AnnotationStore;
use serde::Serialize;

use crate::DataArgs;

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn annotations(path: &Path) -> Result<AnnotationStore> {
    let (store, stats) = load_annotations(path).with_context(|| format!("loading {}", path.display()))?;
    if stats.skipped > 0 {
        tracing::warn!(skipped = stats.skipped, "malformed annotation records skipped");
    }
    Ok(store)
}

/// Task prefixes with at least one `{prefix}.{split}.jsonl` file.
pub fn task_prefixes(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".jsonl") else { continue };
        if let Some((prefix, split)) = stem.rsplit_once('.') {
            if pointqa::Split::parse(split).is_some() {
                out.insert(prefix.to_string());
            }
        }
    }
    Ok(out)
}

impl DataArgs {
    pub fn task(&self) -> Result<String> {
        if let Some(t) = &self.task {
            return Ok(t.clone());
        }
        let prefixes = task_prefixes(&self.data)?;
        match prefixes.len() {
            1 => Ok(prefixes.into_iter().next().expect("one prefix")),
            0 => bail!("no dataset files in {}", self.data.display()),
            _ => bail!("{} holds several tasks ({}); pass --task", self.data.display(), prefixes.into_iter().collect::<Vec<_>>().join(", ")),
        }
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.annotations.clone().unwrap_or_else(|| self.data.join("annotations.jsonl"))
    }

    pub fn load(&self) -> Result<(AnnotationStore, FeatureStore)> {
        let store = annotations(&self.annotations_path())?;
        let dir = self.features.clone().unwrap_or_else(|| self.data.join("features"));
        let features = FeatureStore::open(&dir).with_context(|| format!("opening features in {}", dir.display()))?;
        Ok((store, features))
    }

    pub fn instances(&self) -> Result<Vec<pointqa::PointQAInstance>> {
        let task = self.task()?;
        let all = pointqa::dataset::read_split_files(&self.data, &task)?;
        if all.is_empty() {
            bail!("no {task} instances in {}", self.data.display());
        }
        Ok(all)
    }
}
