//! Named parameter collections and their on-disk checkpoint format: a JSON
//! manifest listing names and shapes plus a binary32 little-endian blob in
//! manifest order, the same data layout the embedding stores use.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    params: Vec<ParamEntry>,
    meta: serde_json::Value,
}

/// Ordered, name-indexed parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamMap {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamMap {
    pub fn new() -> Self {
        ParamMap::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateId { id: name });
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::UnknownId {
                id: name.to_string(),
                kind: "parameter".to_string(),
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::UnknownId {
                id: name.to_string(),
                kind: "parameter".to_string(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    /// Write manifest (`path`) and blob (`path` with `.bin` extension).
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let manifest = CheckpointManifest {
            params: self
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::malformed("checkpoint manifest", e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))?;

        let blob_path = path.with_extension("bin");
        let mut file = fs::File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        for t in &self.tensors {
            file.write_all(&t.to_f32_bytes())
                .map_err(|e| Error::io(&blob_path, e))?;
        }
        Ok(())
    }

    /// Load a checkpoint pair; returns the parameters and the manifest meta.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&raw)
            .map_err(|e| Error::malformed("checkpoint manifest", e.to_string()))?;

        let blob_path = path.with_extension("bin");
        let mut file = fs::File::open(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| Error::io(&blob_path, e))?;
        let expected: usize = manifest
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        if bytes.len() != expected * 4 {
            return Err(Error::malformed(
                "checkpoint blob",
                format!("{} bytes, manifest expects {}", bytes.len(), expected * 4),
            ));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("checkpoint blob {}", blob_path.display()),
            });
        }

        let mut map = ParamMap::new();
        let mut off = 0;
        for entry in manifest.params {
            let count: usize = entry.shape.iter().product();
            let tensor = Tensor::from_f32_slice(entry.shape, &values[off..off + count])?;
            off += count;
            map.insert(entry.name, tensor)?;
        }
        Ok((map, manifest.meta))
    }
}
