//! Single-file named-tensor container.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of UTF-8
//! JSON (space padded so the payload starts 8-byte aligned), then the payload
//! of little-endian `f32` values. Each header entry maps a tensor name to
//! `{dtype, shape, byte_offset, byte_length}` with offsets relative to the
//! payload start. The reserved key `__metadata__` carries free-form JSON.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::Params;
use crate::scalar::Scalar;

const METADATA_KEY: &str = "__metadata__";
const ALIGN: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
    pub byte_length: usize,
}

/// In-memory form of a container file. Tensors keep their insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorContainer {
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl TensorContainer {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = serde_json::Map::new();
        index.insert(METADATA_KEY.into(), self.metadata.clone());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name == METADATA_KEY {
                return Err(Error::Format(format!("tensor name `{name}` is reserved")));
            }
            let entry = TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                byte_offset: offset,
                byte_length: 4 * t.len(),
            };
            if index
                .insert(name.clone(), serde_json::to_value(&entry)?)
                .is_some()
            {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            offset = align_up(offset + entry.byte_length);
        }
        let mut header = serde_json::to_vec(&Value::Object(index))?;
        header.resize(align_up(header.len()), b' ');

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let payload_start = out.len();
        for (_, t) in &self.tensors {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.resize(payload_start + align_up(out.len() - payload_start), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("file shorter than the header length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file size")))?;
        let header: Value = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
        let Value::Object(mut index) = header else {
            return Err(Error::Format("header is not a JSON object".into()));
        };
        let metadata = index.remove(METADATA_KEY).unwrap_or(Value::Null);
        let payload = &bytes[header_end..];

        let mut entries = Vec::with_capacity(index.len());
        for (name, v) in index {
            let entry: TensorEntry = serde_json::from_value(v)
                .map_err(|e| Error::Format(format!("bad index entry for `{name}`: {e}")))?;
            entries.push((name, entry));
        }
        entries.sort_by_key(|(_, e)| e.byte_offset);

        let mut tensors = Vec::with_capacity(entries.len());
        let mut prev_end = 0usize;
        for (name, e) in entries {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("`{name}` has unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.byte_length != 4 * n {
                return Err(Error::Format(format!(
                    "`{name}` byte_length {} disagrees with shape {:?}",
                    e.byte_length, e.shape
                )));
            }
            if e.byte_offset % ALIGN != 0 {
                return Err(Error::Format(format!("`{name}` offset {} is not 8-byte aligned", e.byte_offset)));
            }
            if e.byte_offset < prev_end {
                return Err(Error::Format(format!("`{name}` overlaps the previous tensor")));
            }
            let end = e.byte_offset + e.byte_length;
            if end > payload.len() {
                return Err(Error::Truncated {
                    name,
                    needed: end,
                    available: payload.len(),
                });
            }
            prev_end = end;
            let data: Vec<f32> = payload[e.byte_offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data)?;
            t.ensure_finite(&name)?;
            tensors.push((name, t));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Builds a container from every parameter of `model`.
    pub fn from_params<T: Scalar, P: Params<T>>(metadata: Value, model: &P) -> Self {
        let mut c = Self::new(metadata);
        for (name, t) in model.tensors() {
            c.push(name, t.cast());
        }
        c
    }

    /// Copies tensors into `model` by name. Missing or misshapen tensors are
    /// errors; tensors the model does not know are returned as warnings.
    pub fn load_into<T: Scalar, P: Params<T>>(&self, model: &mut P) -> Result<Vec<String>> {
        let mut by_name: BTreeMap<&str, &Tensor<f32>> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, dst) in model.tensors_mut() {
            let src = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            src.expect_shape(dst.shape(), &name)?;
            *dst = src.cast();
        }
        Ok(by_name
            .keys()
            .map(|n| format!("ignoring unknown tensor `{n}`"))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new(serde_json::json!({"kind": "test"}));
        c.push("b", Tensor::new([3], vec![1.0f32, -2.5, 3.25]).unwrap());
        c.push("a", Tensor::new([2, 2], vec![0.1f32, 0.2, 0.3, f32::MIN_POSITIVE]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = TensorContainer::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(header_len % 8, 0);
    }

    #[test]
    fn rejects_truncation_and_bad_lengths() {
        let bytes = sample().to_bytes().unwrap();
        let err = TensorContainer::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("payload shorter than index"));
        assert!(TensorContainer::from_bytes(&bytes[..4]).is_err());

        let needle = b"\"byte_length\":12";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut bad = bytes.clone();
        bad[at + needle.len() - 2..at + needle.len()].copy_from_slice(b"16");
        let err = TensorContainer::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("disagrees with shape"), "{err}");
    }

    #[test]
    fn rejects_non_finite_payload() {
        let mut c = TensorContainer::new(Value::Null);
        c.push("x", Tensor::new([1], vec![f32::NAN]).unwrap());
        let bytes = c.to_bytes().unwrap();
        assert!(matches!(TensorContainer::from_bytes(&bytes), Err(Error::NonFinite(_))));
    }
}
