//! Checkpoint container: an 8-byte little-endian header length, a JSON
//! header, then the tensors back to back, each a complete `UVSG` record.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the tensor record, relative to the end of the header.
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    /// Free-form state such as optimizer counters and RNG state.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub extra: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let rec = t.encode(T::DTYPE);
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
                length: rec.len(),
            });
            payload.extend_from_slice(&rec);
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: entries,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("checkpoint shorter than its header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + hlen {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {} unsupported", header.format_version)));
        }
        let payload = &bytes[8 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let rec = payload
                .get(e.offset..e.offset + e.length)
                .ok_or_else(|| Error::Format(format!("tensor {} out of bounds", e.name)))?;
            let (t, used) = Tensor::<T>::decode(rec)?;
            if used != e.length || t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!("tensor {} does not match header", e.name)));
            }
            tensors.push((e.name.clone(), t));
        }
        Ok(Self { config: header.config, tensors, extra: header.extra })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
