//! Embedding stores: id-indexed matrices of precomputed feature vectors.
//!
//! A store on disk is a pair of files: a JSON manifest
//! `{"dim": int, "count": int, "kind": string, "ids": [string, ...]}` and a
//! sibling data file (same path with a `.bin` extension) of exactly
//! `dim * count` IEEE-754 binary32 little-endian values, row-major, in id
//! order. Vectors are kept unnormalized; similarity ops normalize internally.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a stored vector describes. Token embeddings back the deterministic
/// stand-in sentence encoder used by evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Image,
    ReviewText,
    Sentence,
    UserProfile,
    Token,
}

impl EmbeddingKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EmbeddingKind::Image => "image",
            EmbeddingKind::ReviewText => "review-text",
            EmbeddingKind::Sentence => "sentence",
            EmbeddingKind::UserProfile => "user-profile",
            EmbeddingKind::Token => "token",
        }
    }
}

impl std::fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reference to one row of a store of a given kind.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbeddingRef {
    pub id: String,
    pub kind: EmbeddingKind,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dim: usize,
    count: usize,
    kind: EmbeddingKind,
    ids: Vec<String>,
}

/// Immutable id-indexed matrix of feature vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    kind: EmbeddingKind,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

fn data_path_for(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

impl EmbeddingStore {
    /// Build a store from rows held in memory. Rejects duplicate ids,
    /// ragged rows and non-finite values.
    pub fn from_rows(
        kind: EmbeddingKind,
        dim: usize,
        rows: Vec<(String, Vec<f32>)>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::malformed("store", "dim must be positive"));
        }
        let mut ids = Vec::with_capacity(rows.len());
        let mut index = HashMap::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, row) in rows {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("embedding row {id}"),
                });
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::DuplicateId { id });
            }
            ids.push(id);
            data.extend_from_slice(&row);
        }
        Ok(EmbeddingStore {
            dim,
            kind,
            ids,
            index,
            data,
        })
    }

    /// Load a store from its manifest path. The data file must sit next to
    /// the manifest with a `.bin` extension and agree on dim and count.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&raw)
            .map_err(|e| Error::malformed("store manifest", e.to_string()))?;
        if manifest.dim == 0 {
            return Err(Error::malformed("store manifest", "dim must be positive"));
        }
        if manifest.ids.len() != manifest.count {
            return Err(Error::malformed(
                "store manifest",
                format!(
                    "count field {} disagrees with {} listed ids",
                    manifest.count,
                    manifest.ids.len()
                ),
            ));
        }

        let data_path = data_path_for(manifest_path);
        let mut file = fs::File::open(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| Error::io(&data_path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::malformed(
                "store data",
                format!("size {} is not a multiple of 4", bytes.len()),
            ));
        }
        let value_count = bytes.len() / 4;
        if value_count != manifest.dim * manifest.count {
            let actual_rows = value_count / manifest.dim;
            return Err(Error::RowCountMismatch {
                declared: manifest.count,
                actual: actual_rows,
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("store data value {pos} of {}", data_path.display()),
            });
        }

        let mut index = HashMap::with_capacity(manifest.ids.len());
        for (i, id) in manifest.ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId { id: id.clone() });
            }
        }
        Ok(EmbeddingStore {
            dim: manifest.dim,
            kind: manifest.kind,
            ids: manifest.ids,
            index,
            data,
        })
    }

    /// Write the manifest and data pair. Round-trips bit-exactly.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let manifest = Manifest {
            dim: self.dim,
            count: self.ids.len(),
            kind: self.kind,
            ids: self.ids.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::malformed("store manifest", e.to_string()))?;
        fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;

        let data_path = data_path_for(manifest_path);
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
        file.write_all(&bytes)
            .map_err(|e| Error::io(&data_path, e))?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn row(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn row_at(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row for `id`, as an error if absent.
    pub fn require(&self, id: &str) -> Result<&[f32]> {
        self.row(id).ok_or_else(|| Error::UnknownId {
            id: id.to_string(),
            kind: self.kind.to_string(),
        })
    }

    /// Row widened to f64 for downstream math.
    pub fn row_f64(&self, id: &str) -> Result<Vec<f64>> {
        Ok(self.require(id)?.iter().map(|&v| v as f64).collect())
    }

    pub fn resolve(&self, r: &EmbeddingRef) -> Result<&[f32]> {
        if r.kind != self.kind {
            return Err(Error::UnknownId {
                id: r.id.clone(),
                kind: r.kind.to_string(),
            });
        }
        self.require(&r.id)
    }
}

fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Cosine similarity of two nonzero vectors of equal length.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = norm_sq(a).sqrt();
    let nb = norm_sq(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm {
            op: "cosine_sim".to_string(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine dis-similarity: `1 - cosine_sim`, in [0, 2].
pub fn dissimilarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_sim(a, b)?)
}

pub fn cosine_sim_f32(a: &[f32], b: &[f32]) -> Result<f64> {
    let aw: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bw: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    cosine_sim(&aw, &bw)
}

pub fn dissimilarity_f32(a: &[f32], b: &[f32]) -> Result<f64> {
    Ok(1.0 - cosine_sim_f32(a, b)?)
}
