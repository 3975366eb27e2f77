//! Checkpoint file: one JSON header line, then little-endian f64 blobs of
//! every parameter tensor in declared order, followed by the optimizer
//! velocities when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "pmmseg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    step: usize,
    model: ModelConfig,
    /// Free-form echo of the run configuration.
    run: serde_json::Value,
    tensors: Vec<TensorEntry>,
    has_velocity: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub model: ModelConfig,
    pub run: serde_json::Value,
    pub params: ParamStore,
    pub velocity: Option<ParamStore>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(v) = &self.velocity {
            self.params.check_compatible(v)?;
        }
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            model: self.model.clone(),
            run: self.run.clone(),
            tensors: self
                .params
                .entries()
                .iter()
                .map(|e| TensorEntry {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                })
                .collect(),
            has_velocity: self.velocity.is_some(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for store in std::iter::once(&self.params).chain(&self.velocity) {
            for e in store.entries() {
                for v in e.tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let mut payload = bytes[newline + 1..].chunks_exact(8);
        let floats_per_store: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let stores = if header.has_velocity { 2 } else { 1 };
        if payload.len() != floats_per_store * stores || !payload.remainder().is_empty() {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, header declares {}",
                bytes.len() - newline - 1,
                floats_per_store * stores * 8
            )));
        }
        let mut read_store = || {
            let mut store = ParamStore::default();
            for t in &header.tensors {
                let n = t.shape.iter().product();
                let data = payload
                    .by_ref()
                    .take(n)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                store.push(t.name.clone(), Tensor::new(t.shape.clone(), data)?);
            }
            Ok::<_, Error>(store)
        };
        let params = read_store()?;
        let velocity = if header.has_velocity { Some(read_store()?) } else { None };
        Ok(Self {
            step: header.step,
            model: header.model,
            run: header.run,
            params,
            velocity,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
