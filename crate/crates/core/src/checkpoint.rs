//! Binary checkpoint: `DVQ1` magic, a little-endian `u64` manifest length,
//! a JSON manifest, then the raw little-endian `f32` payload.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DVQ1";
const HEADER: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    pub model: ModelConfig,
    /// Resolved run configuration, kept for provenance.
    pub run: serde_json::Value,
    pub vocab: Vocab,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub run: serde_json::Value,
    pub vocab: Vocab,
    pub labels: Vec<String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, vocab: Vocab, labels: Vec<String>, run: serde_json::Value) -> Self {
        Self {
            model: model.config.clone(),
            run,
            vocab,
            labels,
            tensors: model.named_tensors(),
        }
    }

    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.model.clone(), &mut RngState::new(0))?;
        model.load_named_tensors(self.tensors.clone())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            });
            offset += t.len() * 4;
        }
        let manifest = serde_json::to_vec(&Manifest {
            tensors: entries,
            model: self.model.clone(),
            run: self.run.clone(),
            vocab: self.vocab.clone(),
            labels: self.labels.clone(),
        })?;
        let mut out = Vec::with_capacity(HEADER + manifest.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        if bytes.len() < HEADER {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let len = u64::from_le_bytes(bytes[4..HEADER].try_into().expect("8 bytes")) as usize;
        let payload_start = HEADER
            .checked_add(len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated manifest: declared {len} bytes")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER..payload_start])
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut expected = 0usize;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}`: unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            if e.offset != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}`: offset {} inconsistent with layout (expected {expected})",
                    e.name, e.offset
                )));
            }
            let numel: usize = e.shape.iter().product();
            let end = e.offset + numel * 4;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated payload: tensor `{}` needs bytes up to {end}, payload has {}",
                    e.name,
                    payload.len()
                )));
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
            expected = end;
        }
        if expected != payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, manifest describes {expected}",
                payload.len()
            )));
        }
        Ok(Self {
            model: manifest.model,
            run: manifest.run,
            vocab: manifest.vocab,
            labels: manifest.labels,
            tensors,
        })
    }

    /// Writes to a temporary sibling then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
