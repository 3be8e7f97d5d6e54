//! Named-tensor archive: a safetensors container whose metadata carries a
//! single JSON manifest entry. Serialization is deterministic, so
//! `to_bytes(from_bytes(b)) == b` for any archive this module wrote.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MANIFEST_KEY: &str = "manifest";

#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub manifest: Value,
}

impl Archive {
    pub fn new(manifest: Value) -> Self {
        Archive {
            tensors: BTreeMap::new(),
            manifest,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Fetches a tensor, failing with a format error that names it.
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::format(format!("archive is missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_string(&self.manifest)
            .map_err(|e| Error::format(format!("manifest serialization: {e}")))?;
        let mut meta = HashMap::new();
        meta.insert(MANIFEST_KEY.to_string(), manifest);
        let contiguous: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
            .collect::<Result<_>>()?;
        safetensors::serialize(contiguous, Some(meta))
            .map_err(|e| Error::format(format!("safetensors serialization: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::format(format!("not a tensor archive: {e}")))?;
        let manifest = match meta.metadata().as_ref().and_then(|m| m.get(MANIFEST_KEY)) {
            Some(s) => serde_json::from_str(s)
                .map_err(|e| Error::format(format!("manifest is not valid JSON: {e}")))?,
            None => return Err(Error::format("archive has no manifest entry")),
        };
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Archive { tensors, manifest })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }

    /// Manifest string field, or a format error naming the key.
    pub fn manifest_str(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::format(format!("manifest is missing string field `{key}`")))
    }
}

/// SHA-256 over tensor names, shapes, dtypes and raw bytes, in name order.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        h.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
        let bytes = t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        for v in bytes {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Archive {
        let mut a = Archive::new(json!({"kind": "test", "version": 1, "z": [1.5, 2.5]}));
        a.insert(
            "b.weight",
            Tensor::arange(0f32, 6.0, &Device::Cpu).unwrap().reshape((2, 3)).unwrap(),
        );
        a.insert("a.bias", Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap());
        a
    }

    #[test]
    fn bytes_roundtrip_is_exact() {
        let bytes = sample().to_bytes().unwrap();
        let back = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.manifest["kind"], "test");
        assert_eq!(back.get("b.weight").unwrap().dims(), &[2, 3]);
    }

    #[test]
    fn missing_tensor_is_named() {
        let a = sample();
        let err = a.get("conv9.bias").unwrap_err().to_string();
        assert!(err.contains("conv9.bias"), "{err}");
    }

    #[test]
    fn garbage_is_a_format_error() {
        assert!(matches!(
            Archive::from_bytes(b"definitely not safetensors"),
            Err(Error::Format(_))
        ));
    }
}
