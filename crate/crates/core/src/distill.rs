//! Image-sentence alignment classification and explanation distillation.
//!
//! A logistic classifier over concatenated sentence and image embeddings
//! decides whether a sentence describes an image. Review sentences scoring
//! at or above a threshold against one of the review's images become
//! explanation pairs; its confidence also drives the alignment evaluation
//! metric.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::dataset::{ExplanationPair, ReviewRecord};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{AdamW, AdamWConfig};
use crate::store::EmbeddingStore;
use crate::tensor::Tensor;

/// Logistic alignment scorer on `[sentence; image]` features.
#[derive(Debug, Clone)]
pub struct AlignmentClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub sentence_dim: usize,
    pub image_dim: usize,
}

/// One training example: concatenated features plus binary label.
#[derive(Debug, Clone)]
pub struct LabeledPair {
    pub features: Vec<f64>,
    pub label: bool,
}

/// Join annotated pairs against the embedding stores.
pub fn assemble_pairs(
    pairs: &[crate::dataset::AlignedPair],
    sentences: &EmbeddingStore,
    images: &EmbeddingStore,
) -> Result<Vec<LabeledPair>> {
    pairs
        .iter()
        .map(|p| {
            let mut features = sentences.row_f64(&p.sentence_id)?;
            features.extend(images.row_f64(&p.image_id)?);
            Ok(LabeledPair {
                features,
                label: p.label != 0,
            })
        })
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl AlignmentClassifier {
    /// Alignment confidence in (0, 1).
    pub fn score(&self, sentence: &[f64], image: &[f64]) -> Result<f64> {
        if sentence.len() != self.sentence_dim {
            return Err(Error::DimMismatch {
                expected: self.sentence_dim,
                got: sentence.len(),
            });
        }
        if image.len() != self.image_dim {
            return Err(Error::DimMismatch {
                expected: self.image_dim,
                got: image.len(),
            });
        }
        let mut z = self.bias;
        for (w, x) in self.weights.iter().zip(sentence.iter().chain(image)) {
            z += w * x;
        }
        Ok(sigmoid(z))
    }

    pub fn score_features(&self, features: &[f64]) -> Result<f64> {
        let (s, v) = features.split_at(self.sentence_dim.min(features.len()));
        self.score(s, v)
    }
}

/// Fit the classifier by full-batch AdamW on weighted binary cross-entropy.
/// Class weights are inverse-frequency so imbalanced annotation sets do not
/// collapse to the majority class. Deterministic for a fixed seed.
pub fn train_classifier(
    data: &[LabeledPair],
    sentence_dim: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<AlignmentClassifier> {
    if data.is_empty() {
        return Err(Error::EmptyInput {
            what: "training pairs".to_string(),
        });
    }
    let n_pos = data.iter().filter(|p| p.label).count();
    let n_neg = data.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let dim = data[0].features.len();
    if sentence_dim >= dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: sentence_dim,
        });
    }
    let n = data.len() as f64;
    let w_pos = n / (2.0 * n_pos as f64);
    let w_neg = n / (2.0 * n_neg as f64);

    let mut features = Vec::with_capacity(data.len() * dim);
    let mut labels = Vec::with_capacity(data.len());
    let mut weights = Vec::with_capacity(data.len());
    for p in data {
        if p.features.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: p.features.len(),
            });
        }
        features.extend_from_slice(&p.features);
        labels.push(if p.label { 1.0 } else { 0.0 });
        weights.push(if p.label { w_pos } else { w_neg });
    }
    let x = Tensor::matrix(data.len(), dim, features)?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut w = Tensor::vector((0..dim).map(|_| rng.gen_range(-0.01..0.01)).collect());
    let mut b = Tensor::vector(vec![0.0]);
    let mut opt_w = AdamW::new(AdamWConfig::adam(lr), dim);
    let mut opt_b = AdamW::new(AdamWConfig::adam(lr), 1);

    for _ in 0..epochs {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let wv = g.param(w.reshaped(vec![dim, 1])?)?;
        let bv = g.param(b.clone())?;
        let zs = g.matmul(xv, wv)?;
        let zs = g.add_bias(zs, bv)?;
        let zs = g.reshape(zs, vec![data.len()])?;
        let loss = g.bce_with_logits(zs, &labels, &weights)?;
        let loss = g.scale(loss, 1.0 / n)?;
        let grads = g.backward(loss)?;
        let gw = grads.get_or_zeros(wv, &[dim, 1]).reshaped(vec![dim])?;
        let gb = grads.get_or_zeros(bv, &[1]);
        opt_w.step(&mut w, &gw)?;
        opt_b.step(&mut b, &gb)?;
    }

    Ok(AlignmentClassifier {
        weights: w.data().to_vec(),
        bias: b.data()[0],
        sentence_dim,
        image_dim: dim - sentence_dim,
    })
}

/// Ranking AUC and F1 at the 0.5 operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierEval {
    pub auc: f64,
    pub f1: f64,
}

/// AUC as the Mann-Whitney rank statistic (ties counted half), F1 with a
/// 0.5 decision threshold. The held-out set must contain both labels.
pub fn eval_scores(scores: &[f64], labels: &[bool]) -> Result<ClassifierEval> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }

    // Average ranks over the pooled sample.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let auc =
        (rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64);

    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= 0.5;
        match (pred, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => {}
        }
    }
    let f1 = if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    };
    Ok(ClassifierEval { auc, f1 })
}

pub fn eval_classifier(
    classifier: &AlignmentClassifier,
    held_out: &[LabeledPair],
) -> Result<ClassifierEval> {
    let scores: Vec<f64> = held_out
        .iter()
        .map(|p| classifier.score_features(&p.features))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = held_out.iter().map(|p| p.label).collect();
    eval_scores(&scores, &labels)
}

/// Keep every (sentence, image) pair of the review whose alignment
/// confidence reaches the threshold. A review where nothing clears the
/// threshold yields an empty list and drops out of the corpus.
pub fn distill_review(
    review: &ReviewRecord,
    threshold: f64,
    classifier: &AlignmentClassifier,
    sentences: &EmbeddingStore,
    images: &EmbeddingStore,
) -> Result<Vec<ExplanationPair>> {
    let mut kept = Vec::new();
    for (sentence_idx, sentence) in review.sentences.iter().enumerate() {
        let s_emb = sentences.row_f64(&sentence.id)?;
        for image_id in &review.images {
            let v_emb = images.row_f64(image_id)?;
            let score = classifier.score(&s_emb, &v_emb)?;
            if score >= threshold {
                kept.push(ExplanationPair {
                    review_id: review.review_id.clone(),
                    sentence_idx,
                    image_id: image_id.clone(),
                    score,
                });
            }
        }
    }
    Ok(kept)
}

/// Assemble per-review explanation targets from the kept pairs: the kept
/// sentences joined in order, entity spans shifted onto the joined token
/// stream. Reviews with no kept pair are dropped.
pub fn assemble_targets(
    records: &[ReviewRecord],
    kept: &[ExplanationPair],
) -> Vec<crate::dataset::TargetRecord> {
    use std::collections::{BTreeSet, HashMap};
    let mut kept_by_review: HashMap<&str, BTreeSet<usize>> = HashMap::new();
    for pair in kept {
        kept_by_review
            .entry(pair.review_id.as_str())
            .or_default()
            .insert(pair.sentence_idx);
    }
    let mut targets = Vec::new();
    for record in records {
        let Some(sentence_idxs) = kept_by_review.get(record.review_id.as_str()) else {
            continue;
        };
        let mut text_parts = Vec::new();
        let mut entities = Vec::new();
        let mut offset = 0;
        for &idx in sentence_idxs {
            let Some(sentence) = record.sentences.get(idx) else {
                continue;
            };
            for span in &sentence.entities {
                entities.push(crate::dataset::EntitySpan {
                    start: span.start + offset,
                    end: span.end + offset,
                    entity: span.entity.clone(),
                });
            }
            offset += crate::vocab::tokenize(&sentence.text).len();
            text_parts.push(sentence.text.clone());
        }
        if text_parts.is_empty() {
            continue;
        }
        targets.push(crate::dataset::TargetRecord {
            review_id: record.review_id.clone(),
            user_id: record.user_id.clone(),
            business_id: record.business_id.clone(),
            text: text_parts.join(" "),
            entities,
        });
    }
    targets
}
