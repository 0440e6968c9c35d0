//! Named-tensor persistence: a JSON manifest plus one raw little-endian f64 blob.
//!
//! ```text
//! model.json  {"format": "iseg-weights/1", "blob": "model.bin",
//!              "tensors": [{"name": .., "shape": [..], "offset": <byte offset>}],
//!              "meta": {..}}
//! model.bin   concatenated f64 values, little-endian, manifest order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "iseg-weights/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Blob path that sits next to a manifest (`x.json` -> `x.bin`).
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Serializes tensors (in map order) into manifest + blob bytes.
pub fn encode(tensors: &BTreeMap<String, Tensor>, blob_name: &str, meta: serde_json::Value) -> (Manifest, Vec<u8>) {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_VERSION.to_string(),
        blob: blob_name.to_string(),
        tensors: entries,
        meta,
    };
    (manifest, blob)
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format {:?}, expected {FORMAT_VERSION:?}",
            manifest.format
        )));
    }
    let mut out = BTreeMap::new();
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        let end = e.offset + numel * 8;
        if end > blob.len() || e.offset % 8 != 0 {
            return Err(Error::Format(format!(
                "tensor {} [{}..{end}) outside blob of {} bytes",
                e.name,
                e.offset,
                blob.len()
            )));
        }
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::Format(format!("tensor {}: {err}", e.name)))?;
        if out.insert(e.name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>, meta: serde_json::Value) -> Result<()> {
    let blob_file = blob_path(path);
    let blob_name = blob_file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Format(format!("bad weights path {}", path.display())))?
        .to_string();
    let (manifest, blob) = encode(tensors, &blob_name, meta);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob_file, blob).map_err(|e| Error::io(&blob_file, e))?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(BTreeMap<String, Tensor>, serde_json::Value)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let blob_file = path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let tensors = decode(&manifest, &blob)?;
    Ok((tensors, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_is_lossless(values in proptest::collection::vec(-1e300f64..1e300, 1..40), split in 1usize..39) {
            let split = split.min(values.len() - 1).max(1).min(values.len());
            let mut map = BTreeMap::new();
            map.insert("a".to_string(), Tensor::new(vec![split], values[..split].to_vec()).unwrap());
            if split < values.len() {
                map.insert("b".to_string(), Tensor::new(vec![values.len() - split], values[split..].to_vec()).unwrap());
            }
            let (m, blob) = encode(&map, "x.bin", serde_json::Value::Null);
            let back = decode(&m, &blob).unwrap();
            prop_assert_eq!(back, map);
        }
    }

    #[test]
    fn rejects_unknown_format_and_short_blob() {
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), Tensor::full(&[2, 2], 1.5));
        let (mut m, blob) = encode(&map, "x.bin", serde_json::Value::Null);
        assert!(decode(&m, &blob[..16]).is_err());
        m.format = "iseg-weights/0".into();
        assert!(matches!(decode(&m, &blob), Err(Error::Format(_))));
    }

    #[test]
    fn save_writes_manifest_and_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), Tensor::full(&[3], -0.25));
        save(&path, &map, serde_json::json!({"k": 1})).unwrap();
        let bytes = fs::read(dir.path().join("w.bin")).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..8], &(-0.25f64).to_le_bytes());
        let (back, meta) = load(&path).unwrap();
        assert_eq!(back, map);
        assert_eq!(meta["k"], 1);
        let manifest: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        assert_eq!(manifest["format"], "iseg-weights/1");
    }
}
