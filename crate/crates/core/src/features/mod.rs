//! Region proposals: the on-disk `.pqf` format, an in-memory store, and
//! point-conditioned selection.
//!
//! A `.pqf` file is little-endian: magic `PQF1`, `u32` proposal count `P`,
//! `u32` feature width `D`, then `P` records of `[x, y, w, h, score]` as
//! `f32`, then `P·D` `f32` feature values in row-major order. A directory
//! of such files is indexed by `manifest.json` (`{image_id: relative_path}`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::BoundingBox;

pub mod select;
pub mod synth;


pub use select::{select_regions, SelectError, SelectedRegions, Strategy};
pub use synth::{generate_world, Composition, PartSpec, SynthOracle, SynthTask, SynthWorld, SynthWorldConfig};


pub const MAGIC: &[u8; 4] = b"PQF1";
pub const MANIFEST: &str = "manifest.json";
const HEADER_BYTES: usize = 12;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt feature data at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("invalid proposal set: {0}")]
    Invalid(String),
    #[error("bad manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("no features for image {0}")]
    UnknownImage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io { path: path.to_path_buf(), source }
}

/// Candidate regions for one image. `features` is `P × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub image_id: String,
    pub boxes: Vec<BoundingBox>,
    pub scores: Vec<f32>,
    pub features: Array2<f32>,
}

impl ProposalSet {
    pub fn new(image_id: impl Into<String>, boxes: Vec<BoundingBox>, scores: Vec<f32>, features: Array2<f32>) -> Result<Self, FeatureError> {
        let set = Self { image_id: image_id.into(), boxes, scores, features };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let p = self.boxes.len();
        if p == 0 {
            return Err(FeatureError::Invalid("at least one proposal is required".into()));
        }
        if self.scores.len() != p || self.features.nrows() != p {
            return Err(FeatureError::Invalid(format!(
                "{} boxes, {} scores, {} feature rows",
                p,
                self.scores.len(),
                self.features.nrows()
            )));
        }
        if self.features.ncols() == 0 {
            return Err(FeatureError::Invalid("feature width is zero".into()));
        }
        if let Some(s) = self.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(FeatureError::Invalid(format!("score {s} outside [0, 1]")));
        }
        if let Some(b) = self.boxes.iter().find(|b| b.validate().is_err()) {
            return Err(FeatureError::Invalid(format!("degenerate box {b:?}")));
        }
        Ok(())
    }
}

pub fn encode(set: &ProposalSet) -> Vec<u8> {
    let (p, d) = set.features.dim();
    let mut out = Vec::with_capacity(HEADER_BYTES + p * 20 + p * d * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(p as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for (b, s) in set.boxes.iter().zip(&set.scores) {
        for v in [b.x as f32, b.y as f32, b.w as f32, b.h as f32, *s] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in set.features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], FeatureError> {
        if self.bytes.len() - self.pos < n {
            return Err(FeatureError::Corrupt {
                offset: self.pos,
                reason: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FeatureError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, FeatureError> {
        let at = self.pos;
        let v = f32::from_le_bytes(self.take(4, what)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(FeatureError::Corrupt { offset: at, reason: format!("non-finite {what}") });
        }
        Ok(v)
    }
}

pub fn decode(image_id: &str, bytes: &[u8]) -> Result<ProposalSet, FeatureError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(FeatureError::Corrupt { offset: 0, reason: "bad magic, expected PQF1".into() });
    }
    let p = r.u32("proposal count")? as usize;
    let d = r.u32("feature dim")? as usize;
    if p == 0 || d == 0 {
        return Err(FeatureError::Corrupt { offset: 4, reason: format!("empty set: P={p}, D={d}") });
    }
    let expected = HEADER_BYTES + p * 20 + p * d * 4;
    if bytes.len() != expected {
        let reason = format!("length {} does not match header (expected {expected})", bytes.len());
        return Err(FeatureError::Corrupt { offset: bytes.len().min(expected), reason });
    }
    let mut boxes = Vec::with_capacity(p);
    let mut scores = Vec::with_capacity(p);
    for _ in 0..p {
        let at = r.pos;
        let vals = [r.f32("box x")?, r.f32("box y")?, r.f32("box w")?, r.f32("box h")?];
        let b = BoundingBox { x: vals[0] as f64, y: vals[1] as f64, w: vals[2] as f64, h: vals[3] as f64 };
        if b.validate().is_err() {
            return Err(FeatureError::Corrupt { offset: at, reason: format!("degenerate box {vals:?}") });
        }
        let sat = r.pos;
        let s = r.f32("score")?;
        if !(0.0..=1.0).contains(&s) {
            return Err(FeatureError::Corrupt { offset: sat, reason: format!("score {s} outside [0, 1]") });
        }
        boxes.push(b);
        scores.push(s);
    }
    let mut feats = Vec::with_capacity(p * d);
    for _ in 0..p * d {
        feats.push(r.f32("feature value")?);
    }
    let features = Array2::from_shape_vec((p, d), feats).expect("length checked above");
    Ok(ProposalSet { image_id: image_id.to_string(), boxes, scores, features })
}

fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>, FeatureError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| FeatureError::Manifest { path, reason: e.to_string() })
}

/// Reads one image's proposals from a feature directory.
pub fn load_proposals(feature_dir: &Path, image_id: &str) -> Result<ProposalSet, FeatureError> {
    let manifest = read_manifest(feature_dir)?;
    let rel = manifest.get(image_id).ok_or_else(|| FeatureError::UnknownImage(image_id.to_string()))?;
    let path = feature_dir.join(rel);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    decode(image_id, &bytes)
}

/// All proposal sets of a dataset, read-only after construction.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    sets: BTreeMap<String, Arc<ProposalSet>>,
    dim: usize,
}

impl FeatureStore {
    pub fn from_sets(sets: impl IntoIterator<Item = ProposalSet>) -> Result<Self, FeatureError> {
        let mut store = Self::default();
        for set in sets {
            set.validate()?;
            if store.dim == 0 {
                store.dim = set.dim();
            } else if store.dim != set.dim() {
                return Err(FeatureError::Invalid(format!(
                    "image {} has D={}, store has D={}",
                    set.image_id,
                    set.dim(),
                    store.dim
                )));
            }
            store.sets.insert(set.image_id.clone(), Arc::new(set));
        }
        Ok(store)
    }

    /// Loads every file listed in the manifest.
    pub fn open(dir: &Path) -> Result<Self, FeatureError> {
        let manifest = read_manifest(dir)?;
        let sets = manifest
            .par_iter()
            .map(|(id, rel)| {
                let path = dir.join(rel);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                decode(id, &bytes)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_sets(sets)
    }

    /// Writes `{image_id}.pqf` files plus the manifest.
    pub fn write(&self, dir: &Path) -> Result<(), FeatureError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut manifest = BTreeMap::new();
        for (id, set) in &self.sets {
            let name = format!("{id}.pqf");
            let path = dir.join(&name);
            fs::write(&path, encode(set)).map_err(io_err(&path))?;
            manifest.insert(id.clone(), name);
        }
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).expect("string map serializes");
        fs::write(&path, json + "\n").map_err(io_err(&path))
    }

    pub fn get(&self, image_id: &str) -> Option<&Arc<ProposalSet>> {
        self.sets.get(image_id)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<ProposalSet>> {
        self.sets.values()
    }
}
