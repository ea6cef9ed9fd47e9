//! Pipeline configuration: a TOML file of sections whose every field has a
//! default, so a bare run works and any constant can be overridden.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

fn default_data_dir() -> PathBuf {
    PathBuf::from("fixture")
}

/// Input and artifact locations. Relative input paths resolve against
/// `data_dir`; artifact paths resolve against the run's `--out` directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub images: PathBuf,
    pub reviews: PathBuf,
    pub sentences: PathBuf,
    pub profiles: PathBuf,
    pub tokens: PathBuf,
    pub vocab: PathBuf,
    pub entities: PathBuf,
    pub dataset: PathBuf,
    pub pairs: PathBuf,
    pub interactions: PathBuf,
    pub keyword_classes: PathBuf,
    pub classifier: PathBuf,
    pub explanations: PathBuf,
    pub targets: PathBuf,
    pub relevance: PathBuf,
    pub showcases: PathBuf,
    pub checkpoint: PathBuf,
    pub generations: PathBuf,
    pub metric_report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: default_data_dir(),
            images: "images.json".into(),
            reviews: "reviews.json".into(),
            sentences: "sentences.json".into(),
            profiles: "profiles.json".into(),
            tokens: "tokens.json".into(),
            vocab: "vocab.txt".into(),
            entities: "entities.txt".into(),
            dataset: "dataset.jsonl".into(),
            pairs: "pairs.jsonl".into(),
            interactions: "interactions.jsonl".into(),
            keyword_classes: "keyword_classes.json".into(),
            classifier: "classifier.json".into(),
            explanations: "explanations.jsonl".into(),
            targets: "targets.jsonl".into(),
            relevance: "relevance.json".into(),
            showcases: "showcases.jsonl".into(),
            checkpoint: "checkpoint.json".into(),
            generations: "generations.jsonl".into(),
            metric_report: "metric_report.json".into(),
        }
    }
}

impl PathsConfig {
    /// Resolve an input path: absolute stays, relative joins `data_dir`
    /// (itself resolved against `out` when relative).
    pub fn input(&self, out: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        let base = if self.data_dir.is_absolute() {
            self.data_dir.clone()
        } else {
            out.join(&self.data_dir)
        };
        base.join(p)
    }

    /// Resolve an artifact path against the run's output directory.
    pub fn artifact(&self, out: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out.join(p)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub proj_dim: usize,
    pub max_len: usize,
    pub max_images: usize,
    pub max_reviews: usize,
    pub temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            proj_dim: 32,
            max_len: 64,
            max_images: 5,
            max_reviews: 10,
            temperature: 0.1,
            lambda1: 0.2,
            lambda2: 0.2,
            alpha: std::f64::consts::E,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-4,
            weight_decay: 0.01,
            batch: 32,
            epochs: 3,
            seed: 0,
            mode: "ce+ccl+pcl".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DppSection {
    pub k: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for DppSection {
    fn default() -> Self {
        DppSection {
            k: 3,
            lr: 1e-3,
            batch: 512,
            epochs: 300,
            seed: 0,
            hidden: vec![64, 32, 16],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSection {
    pub beam: usize,
    pub max_len: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            beam: 2,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSection {
    pub threshold: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            threshold: 0.5,
            epochs: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSection {
    pub users: usize,
    pub businesses: usize,
    pub images_per_business: usize,
    pub dim: usize,
    pub reviews_per_user: usize,
    pub history_len: usize,
    pub interactions_per_user: usize,
    pub favorite_topics: usize,
}

impl Default for FixtureSection {
    fn default() -> Self {
        FixtureSection {
            users: 50,
            businesses: 12,
            images_per_business: 10,
            dim: 16,
            reviews_per_user: 3,
            history_len: 4,
            interactions_per_user: 10,
            favorite_topics: 3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub dpp: DppSection,
    pub generate: GenerateSection,
    pub distill: DistillSection,
    pub fixture: FixtureSection,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(PipelineConfig::default()),
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
                let config: PipelineConfig = toml::from_str(&raw)
                    .map_err(|e| anyhow::anyhow!("malformed config {}: {e}", p.display()))?;
                Ok(config)
            }
        }
    }

    /// Apply the global `--seed` override to every stage seed.
    pub fn override_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.train.seed = s;
            self.dpp.seed = s;
            self.distill.seed = s;
        }
    }

    pub fn model_config(
        &self,
        vocab: usize,
        image_dim: usize,
        review_dim: usize,
    ) -> showcase_core::model::ModelConfig {
        showcase_core::model::ModelConfig {
            hidden: self.model.hidden,
            heads: self.model.heads,
            enc_layers: self.model.enc_layers,
            dec_layers: self.model.dec_layers,
            vocab,
            image_dim,
            review_dim,
            max_len: self.model.max_len,
            max_images: self.model.max_images,
            max_reviews: self.model.max_reviews,
            proj_dim: self.model.proj_dim,
            temperature: self.model.temperature,
            lambda1: self.model.lambda1,
            lambda2: self.model.lambda2,
            alpha: self.model.alpha,
        }
    }
}
