//! Model checkpoints: one line of compact JSON (format version, model kind,
//! config, tensor directory) terminated by `\n`, then every tensor as
//! little-endian `f32`, in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub config: Value,
    #[serde(default)]
    pub extra: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: Value, extra: Value, store: &ParamStore) -> Self {
        let tensors: Vec<(String, Tensor)> = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Checkpoint {
            header: Header {
                format_version: FORMAT_VERSION,
                kind: kind.to_string(),
                config,
                extra,
                tensors: tensors
                    .iter()
                    .map(|(n, t)| TensorEntry {
                        name: n.clone(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..split])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let payload = &bytes[split + 1..];
        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum();
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Float);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n = entry.shape.iter().product();
            let data: Vec<Float> = floats.by_ref().take(n).collect();
            tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.config.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_from(values: &[f32]) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(vec![values.len()], values.iter().map(|&v| v as Float).collect()).unwrap());
        store.add("b.w", Tensor::from_fn(&[2, 3], |i| i as Float * 0.25));
        store
    }

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(values in prop::collection::vec(-1e6f32..1e6, 1..64)) {
            let store = store_from(&values);
            let ck = Checkpoint::from_store("test", serde_json::json!({"k": 1}), Value::Null, &store);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let ck = Checkpoint::from_store("t", Value::Null, Value::Null, &store_from(&[1.0, 2.0]));
        let mut bytes = ck.to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn payload_is_little_endian_f32() {
        let ck = Checkpoint::from_store("t", Value::Null, Value::Null, &store_from(&[1.5]));
        let bytes = ck.to_bytes().unwrap();
        let split = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&bytes[split + 1..split + 5], &1.5f32.to_le_bytes());
    }
}
