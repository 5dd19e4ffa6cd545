//! Single-file model checkpoints.
//!
//! Layout: magic `PQCK`, `u16` version, `u32` header length, a JSON header
//! (model config, parameter index, free-form metadata), then every
//! parameter as little-endian `f32` in index order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Model, ModelConfig, ModelError};
use crate::nn::Mat;

pub const MAGIC: &[u8; 4] = b"PQCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn to_bytes(model: &Model, metadata: serde_json::Value) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for id in model.params.ids() {
        let v = model.params.value(id);
        tensors.push(TensorEntry { name: model.params.name(id).to_string(), shape: [v.nrows(), v.ncols()], offset: blob.len() });
        for x in v.iter() {
            blob.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    let header = Header { config: model.config.clone(), tensors, metadata };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Header), CheckpointError> {
    let corrupt = |offset: usize, reason: &str| CheckpointError::Corrupt { offset, reason: reason.to_string() };
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(corrupt(0, "bad magic, expected PQCK"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = bytes.get(10..10 + len).ok_or_else(|| corrupt(10, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| corrupt(10, &e.to_string()))?;
    let blob = &bytes[10 + len..];
    let mut model = Model::new(header.config.clone())?;
    if header.tensors.len() != model.params.len() {
        return Err(corrupt(10, "tensor count does not match the architecture"));
    }
    for t in &header.tensors {
        let id = model.params.id(&t.name).ok_or_else(|| corrupt(10, &format!("unknown tensor {}", t.name)))?;
        let dim = model.params.value(id).dim();
        if dim != (t.shape[0], t.shape[1]) {
            return Err(corrupt(10, &format!("tensor {} has shape {:?}, model expects {dim:?}", t.name, t.shape)));
        }
        let n = dim.0 * dim.1;
        let raw = blob.get(t.offset..t.offset + 4 * n).ok_or_else(|| corrupt(10 + len + t.offset, &format!("truncated tensor {}", t.name)))?;
        let values: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        *model.params.value_mut(id) = Mat::from_shape_vec(dim, values).expect("length checked");
    }
    Ok((model, header))
}

pub fn save(model: &Model, path: &Path, metadata: serde_json::Value) -> Result<(), CheckpointError> {
    Ok(fs::write(path, to_bytes(model, metadata))?)
}

pub fn load(path: &Path) -> Result<(Model, Header), CheckpointError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::testutil::{model, sample, tiny_config};
    use crate::models::{Architecture, Streams};

    #[test]
    fn round_trip_preserves_f32_weights_and_predictions() {
        let c = tiny_config(Architecture::Mcan, Streams::ThreeStream);
        let m = model(&c);
        let bytes = to_bytes(&m, serde_json::json!({"note": "x"}));
        let (back, header) = from_bytes(&bytes).unwrap();
        assert_eq!(header.metadata["note"], "x");
        for id in m.params.ids() {
            let a = m.params.value(id).mapv(|v| v as f32 as f64);
            assert_eq!(&a, back.params.value(id));
        }
        assert_eq!(to_bytes(&back, serde_json::json!({"note": "x"})), bytes);
        let s = sample(1, &c, 3, 2);
        let (p, _) = m.predict(&s).unwrap();
        let (q, _) = back.predict(&s).unwrap();
        assert!(p.probs.iter().zip(&q.probs).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn damaged_files_are_rejected() {
        let m = model(&tiny_config(Architecture::PythiaLocal, Streams::PointQ));
        let bytes = to_bytes(&m, serde_json::Value::Null);
        assert!(matches!(from_bytes(b"NOPE0000000"), Err(CheckpointError::Corrupt { offset: 0, .. })));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Corrupt { .. })));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(from_bytes(&v), Err(CheckpointError::Version(9))));
    }
}
