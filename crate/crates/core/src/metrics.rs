//! Corpus evaluation: n-gram overlap (BLEU, NIST), diversity (distinct-n,
//! visual diversity levels), embedding alignment (classifier-based and
//! cosine-based mean-of-max), keyword coverage and length histograms.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::distill::AlignmentClassifier;
use crate::error::{Error, Result};
use crate::store::cosine_sim;

const NGRAM_SEP: char = '\u{1f}';

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let key = window.join(&NGRAM_SEP.to_string());
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-pooled distinct-n: unique n-grams over total n-grams.
pub fn distinct_n(corpus: &[Vec<String>], n: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput {
            what: "corpus".to_string(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument {
            detail: "n must be >= 1".to_string(),
        });
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for seq in corpus {
        if seq.len() >= n {
            for window in seq.windows(n) {
                unique.insert(window.join(&NGRAM_SEP.to_string()));
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument {
            detail: format!("all sequences shorter than n = {n}"),
        });
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Corpus BLEU-n with clipped modified precision and the brevity penalty
/// `exp(min(0, 1 - r/c))`. Single reference per candidate.
pub fn bleu_n(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::DimMismatch {
            expected: references.len(),
            got: candidates.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput {
            what: "candidates".to_string(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument {
            detail: "n must be >= 1".to_string(),
        });
    }
    if candidates.iter().any(|c| c.is_empty()) {
        return Err(Error::EmptyInput {
            what: "candidate sequence".to_string(),
        });
    }
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for k in 1..=n {
            let cand_counts = ngram_counts(cand, k);
            let ref_counts = ngram_counts(reference, k);
            for (gram, &c) in &cand_counts {
                let r = ref_counts.get(gram).copied().unwrap_or(0);
                matches[k - 1] += c.min(r);
                totals[k - 1] += c;
            }
        }
    }
    let mut log_precision = 0.0;
    for k in 0..n {
        if matches[k] == 0 || totals[k] == 0 {
            return Ok(0.0);
        }
        log_precision += (matches[k] as f64 / totals[k] as f64).ln() / n as f64;
    }
    let bp = (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp();
    Ok(bp * log_precision.exp())
}

/// Corpus NIST-n: information-weighted n-gram precision with the NIST
/// brevity factor. Information weights come from the reference corpus:
/// `Info(w_1..w_k) = log2(count(w_1..w_{k-1}) / count(w_1..w_k))`, with the
/// unigram numerator being the corpus token count.
pub fn nist_n(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::DimMismatch {
            expected: references.len(),
            got: candidates.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput {
            what: "candidates".to_string(),
        });
    }
    if candidates.iter().any(|c| c.is_empty()) {
        return Err(Error::EmptyInput {
            what: "candidate sequence".to_string(),
        });
    }

    // Reference-corpus n-gram statistics for the information weights.
    let mut corpus_counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); n + 1];
    let mut total_unigrams = 0usize;
    for reference in references {
        total_unigrams += reference.len();
        for k in 1..=n {
            for (gram, c) in ngram_counts(reference, k) {
                *corpus_counts[k].entry(gram).or_insert(0) += c;
            }
        }
    }
    let info = |gram: &str, k: usize| -> f64 {
        let joint = corpus_counts[k].get(gram).copied().unwrap_or(0);
        if joint == 0 {
            return 0.0;
        }
        let context = if k == 1 {
            total_unigrams
        } else {
            let prefix: Vec<&str> = gram.split(NGRAM_SEP).collect();
            let prefix_key = prefix[..k - 1].join(&NGRAM_SEP.to_string());
            corpus_counts[k - 1].get(&prefix_key).copied().unwrap_or(0)
        };
        if context == 0 {
            0.0
        } else {
            (context as f64 / joint as f64).log2()
        }
    };

    let mut score = 0.0;
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for k in 1..=n {
        let mut weighted = 0.0;
        let mut total = 0usize;
        for (cand, reference) in candidates.iter().zip(references) {
            let cand_counts = ngram_counts(cand, k);
            let ref_counts = ngram_counts(reference, k);
            // Sorted key order keeps the f64 accumulation reproducible
            // across processes.
            let mut grams: Vec<&String> = cand_counts.keys().collect();
            grams.sort_unstable();
            for gram in grams {
                let c = cand_counts[gram];
                total += c;
                let r = ref_counts.get(gram).copied().unwrap_or(0);
                weighted += c.min(r) as f64 * info(gram, k);
            }
        }
        if total > 0 {
            score += weighted / total as f64;
        }
    }
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
    }

    // Brevity factor: 0.5 when the output is two-thirds of the reference.
    let ratio = (cand_len as f64 / ref_len as f64).min(1.0);
    let beta = 0.5f64.ln() / (2.0f64 / 3.0).ln().powi(2);
    let brevity = (beta * ratio.ln().powi(2)).exp();
    Ok(score * brevity)
}

/// Mean over images of the best classifier confidence across sentences.
pub fn clip_align(
    images: &[Vec<f64>],
    sentences: &[Vec<f64>],
    classifier: &AlignmentClassifier,
) -> Result<f64> {
    if images.is_empty() || sentences.is_empty() {
        return Err(Error::EmptyInput {
            what: "clip_align inputs".to_string(),
        });
    }
    let mut total = 0.0;
    for image in images {
        let mut best = f64::NEG_INFINITY;
        for sentence in sentences {
            best = best.max(classifier.score(sentence, image)?);
        }
        total += best;
    }
    Ok(total / images.len() as f64)
}

/// Mean over images of the best cosine similarity across sentences.
pub fn clip_score(images: &[Vec<f64>], sentences: &[Vec<f64>]) -> Result<f64> {
    if images.is_empty() || sentences.is_empty() {
        return Err(Error::EmptyInput {
            what: "clip_score inputs".to_string(),
        });
    }
    let mut total = 0.0;
    for image in images {
        let mut best = f64::NEG_INFINITY;
        for sentence in sentences {
            best = best.max(cosine_sim(sentence, image)?);
        }
        total += best;
    }
    Ok(total / images.len() as f64)
}

/// One corpus image tagged with its business and user.
#[derive(Debug, Clone)]
pub struct CorpusImage {
    pub business_id: String,
    pub user_id: String,
    pub embedding: Vec<f64>,
}

/// The three visual diversity levels; a level with no valid pair is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusDiversity {
    pub intra_business: Option<f64>,
    pub inter_user: Option<f64>,
    pub intra_user: Option<f64>,
}

/// Average pairwise dissimilarity at business level, across users within a
/// business, and within each (user, business) cell. Each level divides by
/// its own valid pair count.
pub fn corpus_diversity(images: &[CorpusImage]) -> Result<CorpusDiversity> {
    if images.is_empty() {
        return Err(Error::EmptyInput {
            what: "diversity corpus".to_string(),
        });
    }
    let mut by_business: BTreeMap<&str, Vec<&CorpusImage>> = BTreeMap::new();
    for img in images {
        by_business.entry(&img.business_id).or_default().push(img);
    }
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for group in by_business.values() {
        for i in 0..group.len() {
            for j in (i + 1)..group.len() {
                let dis = 1.0 - cosine_sim(&group[i].embedding, &group[j].embedding)?;
                sums[0] += dis;
                counts[0] += 1;
                if group[i].user_id != group[j].user_id {
                    sums[1] += dis;
                    counts[1] += 1;
                } else {
                    sums[2] += dis;
                    counts[2] += 1;
                }
            }
        }
    }
    let level = |i: usize| {
        if counts[i] == 0 {
            None
        } else {
            Some(sums[i] / counts[i] as f64)
        }
    };
    Ok(CorpusDiversity {
        intra_business: level(0),
        inter_user: level(1),
        intra_user: level(2),
    })
}

/// Fraction of the reference's distinct keywords of each class that appear
/// in the generated tokens. Classes with no reference keywords are `None`.
pub fn keyword_coverage(
    generated: &[String],
    reference: &[String],
    keyword_classes: &BTreeMap<String, HashSet<String>>,
) -> BTreeMap<String, Option<f64>> {
    let generated_set: HashSet<&str> = generated.iter().map(String::as_str).collect();
    let mut out = BTreeMap::new();
    for (class, tokens) in keyword_classes {
        let ref_keywords: HashSet<&str> = reference
            .iter()
            .map(String::as_str)
            .filter(|t| tokens.contains(*t))
            .collect();
        let coverage = if ref_keywords.is_empty() {
            None
        } else {
            let hit = ref_keywords
                .iter()
                .filter(|t| generated_set.contains(**t))
                .count();
            Some(hit as f64 / ref_keywords.len() as f64)
        };
        out.insert(class.clone(), coverage);
    }
    out
}

/// Six bins of width 10 over [0, 60]; the last bin is closed and absorbs
/// the few cap-length outputs above 60.
pub fn length_histogram(lengths: &[usize]) -> Result<[usize; 6]> {
    if lengths.is_empty() {
        return Err(Error::EmptyInput {
            what: "length corpus".to_string(),
        });
    }
    let mut bins = [0usize; 6];
    for &len in lengths {
        bins[(len / 10).min(5)] += 1;
    }
    Ok(bins)
}

/// Full corpus-level report; alignment metrics are absent when no
/// embeddings were supplied for the generations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub nist4: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub clip_align: Option<f64>,
    pub clip_score: Option<f64>,
    pub keyword_coverage: BTreeMap<String, Option<f64>>,
    pub length_histogram: [usize; 6],
}
