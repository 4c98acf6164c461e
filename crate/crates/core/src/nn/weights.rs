//! Reader and writer for the safetensors container: an 8-byte little-endian
//! header length, a JSON header mapping tensor names to dtype, shape and byte
//! offsets, then the raw little-endian data.
//!
//! Tensors are always written as F64; F32 and F64 are accepted on read so
//! backbone weights exported from common frameworks load directly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

impl TensorStore {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), (shape, data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn metadata(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    /// Serializes deterministically (tensors in name order).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert("__metadata__".into(), serde_json::to_value(&self.metadata).expect("string map"));
        }
        let mut offset = 0;
        for (name, (shape, data)) in &self.tensors {
            let len = data.len() * 8;
            let entry = Entry {
                dtype: "F64".into(),
                shape: shape.clone(),
                data_offsets: [offset, offset + len],
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry"));
            offset += len;
        }
        let mut header = serde_json::to_vec(&serde_json::Value::Object(header)).expect("header");
        while header.len() % 8 != 0 {
            header.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in self.tensors.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Weights(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("file too short"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body_start = 8usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("header length out of range"))?;
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..body_start]).map_err(|e| Error::Weights(format!("bad header: {e}")))?;
        let body = &bytes[body_start..];
        let mut store = TensorStore::default();
        for (name, value) in header {
            if name == "__metadata__" {
                store.metadata = serde_json::from_value(value).map_err(|e| Error::Weights(format!("bad metadata: {e}")))?;
                continue;
            }
            let entry: Entry = serde_json::from_value(value).map_err(|e| Error::Weights(format!("bad entry {name}: {e}")))?;
            let [start, end] = entry.data_offsets;
            if start > end || end > body.len() {
                return Err(Error::Weights(format!("{name}: data offsets out of range")));
            }
            let raw = &body[start..end];
            let count: usize = entry.shape.iter().product();
            let data: Vec<f64> = match entry.dtype.as_str() {
                "F64" => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
                "F32" => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                    .collect(),
                other => return Err(Error::Weights(format!("{name}: unsupported dtype {other}"))),
            };
            if data.len() != count {
                return Err(Error::Weights(format!("{name}: {} values for shape {:?}", data.len(), entry.shape)));
            }
            store.tensors.insert(name, (entry.shape, data));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        TensorStore::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut s = TensorStore::default();
        s.insert("b", vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]);
        s.insert("a", vec![3], vec![0.1, 0.2, 0.3]);
        s.set_metadata("step", "12");
        let bytes = s.to_bytes();
        assert_eq!((u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize) % 8, 0);
        let back = TensorStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn reads_f32_tensors() {
        let header = br#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let s = TensorStore::from_bytes(&bytes).unwrap();
        assert_eq!(s.get("w").unwrap().1, &[1.5, -2.0]);
    }

    #[test]
    fn rejects_truncated_data() {
        let header = br#"{"w":{"dtype":"F64","shape":[2],"data_offsets":[0,16]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(TensorStore::from_bytes(&bytes).is_err());
        assert!(TensorStore::from_bytes(&[1, 2]).is_err());
    }
}
