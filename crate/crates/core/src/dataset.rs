//! Dataset records and JSON-lines file helpers shared by the pipeline
//! stages: raw reviews with sentence annotations, annotated alignment
//! pairs, selection interactions, distilled targets, showcases and
//! generations.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token-index span `[start, end)` within one sentence, plus the surface
/// form of the entity it covers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub entity: String,
}

/// One sentence of a review with its annotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sentence {
    /// Id of this sentence's row in the sentence embedding store.
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub entities: Vec<EntitySpan>,
}

/// One user-business review with history, images and annotated sentences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub review_id: String,
    pub user_id: String,
    pub business_id: String,
    /// Up to 10 historical review-text embedding ids.
    pub history: Vec<String>,
    /// Up to 5 image embedding ids attached to this review.
    pub images: Vec<String>,
    pub sentences: Vec<Sentence>,
}

/// Human (or fixture) annotated image-sentence alignment pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignedPair {
    pub sentence_id: String,
    pub image_id: String,
    pub label: u8,
}

/// One kept explanation pair from distillation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplanationPair {
    pub review_id: String,
    pub sentence_idx: usize,
    pub image_id: String,
    pub score: f64,
}

/// Distilled training/reference target for one review: the kept sentences
/// joined in order, with entity spans remapped to the joined token stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetRecord {
    pub review_id: String,
    pub user_id: String,
    pub business_id: String,
    pub text: String,
    pub entities: Vec<EntitySpan>,
}

/// One image-selection training/evaluation case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub business_id: String,
    /// Id of the fused profile row in the user-profile store.
    pub profile_id: String,
    /// Candidate pool: image ids from the business.
    pub pool: Vec<String>,
    /// Ground-truth subset of the pool.
    pub ground_truth: Vec<String>,
}

/// Selected visual explanation for one user and business.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShowcaseRecord {
    pub user_id: String,
    pub business_id: String,
    pub selected: Vec<String>,
}

/// Generated textual explanation for one showcase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub user_id: String,
    pub business_id: String,
    pub review_id: String,
    pub text: String,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| {
            Error::malformed(
                format!("{} line {}", path.display(), lineno + 1),
                e.to_string(),
            )
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::malformed("jsonl record", e.to_string()))?;
        file.write_all(line.as_bytes())
            .and_then(|_| file.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
