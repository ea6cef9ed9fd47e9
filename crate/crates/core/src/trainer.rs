//! Generator training: teacher-forcing cross-entropy, optionally combined
//! with the cross-modal and personalized contrastive terms. Ablation modes
//! mirror the loss table rows: `ce`, `ce+cl` (both sides vanilla),
//! `ce+ccl` (entity negatives on the image side), `ce+pcl` (history
//! weighting on the text side), and `ce+ccl+pcl` (the full objective).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::contrast::{
    self, ContrastHeads, EntityVocab, LossBreakdown, HEAD_IMAGES, HEAD_REVIEWS, HEAD_TARGET,
};
use crate::dataset::{EntitySpan, ReviewRecord, TargetRecord};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig};
use crate::store::EmbeddingStore;
use crate::vocab::{Vocabulary, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Ce,
    CeCl,
    CeCcl,
    CePcl,
    CeCclPcl,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "ce+cl" => Ok(LossMode::CeCl),
            "ce+ccl" => Ok(LossMode::CeCcl),
            "ce+pcl" => Ok(LossMode::CePcl),
            "ce+ccl+pcl" => Ok(LossMode::CeCclPcl),
            other => Err(Error::InvalidArgument {
                detail: format!(
                    "unknown loss mode {other}; expected ce | ce+cl | ce+ccl | ce+pcl | ce+ccl+pcl"
                ),
            }),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::CeCl => "ce+cl",
            LossMode::CeCcl => "ce+ccl",
            LossMode::CePcl => "ce+pcl",
            LossMode::CeCclPcl => "ce+ccl+pcl",
        }
    }

    fn image_side(&self) -> bool {
        !matches!(self, LossMode::Ce)
    }

    fn text_side(&self) -> bool {
        !matches!(self, LossMode::Ce)
    }

    fn entity_negatives(&self) -> bool {
        matches!(self, LossMode::CeCcl | LossMode::CeCclPcl)
    }

    fn history_weighting(&self) -> bool {
        matches!(self, LossMode::CePcl | LossMode::CeCclPcl)
    }
}

/// One assembled training case with resolved embeddings.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub review_id: String,
    pub user_id: String,
    pub business_id: String,
    pub images: Vec<Vec<f64>>,
    pub reviews: Vec<Vec<f64>>,
    /// Token ids ending with EOS, at most `max_len` long.
    pub target: Vec<u32>,
    pub entity_spans: Vec<EntitySpan>,
    /// Frozen mean of the input history embeddings.
    pub history_mean: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            batch: 32,
            epochs: 1,
            seed: 0,
            mode: LossMode::CeCclPcl,
        }
    }
}

/// Join distilled targets against review records and stores.
/// Records without images or with empty targets are skipped.
pub fn assemble_samples(
    targets: &[TargetRecord],
    records: &[ReviewRecord],
    images: &EmbeddingStore,
    reviews: &EmbeddingStore,
    vocab: &Vocabulary,
    max_len: usize,
    max_images: usize,
    max_reviews: usize,
) -> Result<Vec<TrainSample>> {
    let by_id: std::collections::HashMap<&str, &ReviewRecord> =
        records.iter().map(|r| (r.review_id.as_str(), r)).collect();
    let mut samples = Vec::new();
    for target in targets {
        let record = by_id
            .get(target.review_id.as_str())
            .ok_or_else(|| Error::UnknownId {
                id: target.review_id.clone(),
                kind: "review".to_string(),
            })?;
        if record.images.is_empty() {
            continue;
        }
        let mut tokens = vocab.encode(&target.text);
        if tokens.is_empty() {
            continue;
        }
        tokens.truncate(max_len - 1);
        let content_len = tokens.len();
        tokens.push(EOS);
        let spans: Vec<EntitySpan> = target
            .entities
            .iter()
            .filter(|s| s.end <= content_len)
            .cloned()
            .collect();

        let image_embs: Vec<Vec<f64>> = record
            .images
            .iter()
            .take(max_images)
            .map(|id| images.row_f64(id))
            .collect::<Result<_>>()?;
        let review_embs: Vec<Vec<f64>> = record
            .history
            .iter()
            .take(max_reviews)
            .map(|id| reviews.row_f64(id))
            .collect::<Result<_>>()?;

        let dim = reviews.dim();
        let mut history_mean = vec![0.0; dim];
        if !review_embs.is_empty() {
            for emb in &review_embs {
                for (j, v) in emb.iter().enumerate() {
                    history_mean[j] += v / review_embs.len() as f64;
                }
            }
        }
        samples.push(TrainSample {
            review_id: target.review_id.clone(),
            user_id: target.user_id.clone(),
            business_id: target.business_id.clone(),
            images: image_embs,
            reviews: review_embs,
            target: tokens,
            entity_spans: spans,
            history_mean,
        });
    }
    Ok(samples)
}

struct BoundOptimizers {
    names: Vec<String>,
    optimizers: Vec<AdamW>,
}

impl BoundOptimizers {
    fn new(params: &crate::params::ParamMap, config: AdamWConfig) -> Self {
        BoundOptimizers {
            names: params.names().to_vec(),
            optimizers: params
                .iter()
                .map(|(_, t)| AdamW::new(config, t.len()))
                .collect(),
        }
    }

    fn apply(
        &mut self,
        params: &mut crate::params::ParamMap,
        bound: &std::collections::HashMap<String, Var>,
        grads: &crate::graph::Gradients,
    ) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let var = bound[name];
            let shape = params.get(name)?.shape().to_vec();
            let grad = grads.get_or_zeros(var, &shape);
            self.optimizers[i].step(params.get_mut(name)?, &grad)?;
        }
        Ok(())
    }
}

/// Train the generator (and, in contrastive modes, the projection heads).
/// Returns one loss breakdown per optimization step. Deterministic for a
/// fixed seed; the entity-corruption stream is independent of the
/// shuffling stream, and zero-weighted loss terms are skipped entirely so
/// a `ce+ccl+pcl` run with both weights at zero matches `ce` bit for bit.
pub fn train_model(
    model: &mut Model,
    heads: &mut ContrastHeads,
    samples: &[TrainSample],
    entity_vocab: &EntityVocab,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<Vec<LossBreakdown>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput {
            what: "training samples".to_string(),
        });
    }
    let lambda1 = model.config.lambda1;
    let lambda2 = model.config.lambda2;
    let use_image_side = config.mode.image_side() && lambda1 > 0.0;
    let use_text_side = config.mode.text_side() && lambda2 > 0.0;
    if use_text_side {
        if let Some(bad) = samples.iter().find(|s| s.reviews.is_empty()) {
            return Err(Error::EmptyInput {
                what: format!(
                    "history of review {} (required by the personalized loss)",
                    bad.review_id
                ),
            });
        }
    }

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut entity_rng = ChaCha12Rng::seed_from_u64(config.seed);
    entity_rng.set_stream(1);

    let opt = AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    };
    let mut model_opt = BoundOptimizers::new(&model.params, opt);
    let mut heads_opt = BoundOptimizers::new(&heads.params, opt);

    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch.max(1)) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let breakdown = train_step(
                model,
                heads,
                &batch,
                entity_vocab,
                vocab,
                config,
                use_image_side,
                use_text_side,
                &mut entity_rng,
                &mut model_opt,
                &mut heads_opt,
            )?;
            log.push(breakdown);
        }
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    heads: &mut ContrastHeads,
    batch: &[&TrainSample],
    entity_vocab: &EntityVocab,
    vocab: &Vocabulary,
    config: &TrainConfig,
    use_image_side: bool,
    use_text_side: bool,
    entity_rng: &mut ChaCha12Rng,
    model_opt: &mut BoundOptimizers,
    heads_opt: &mut BoundOptimizers,
) -> Result<LossBreakdown> {
    let b = batch.len();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true)?;
    let heads_bound = heads.bind(&mut g, use_image_side || use_text_side)?;

    let mut ce_terms = Vec::with_capacity(b);
    let mut pooled_images = Vec::with_capacity(b);
    let mut pooled_reviews = Vec::with_capacity(b);
    let mut pooled_targets = Vec::with_capacity(b);
    let mut pooled_entities = Vec::with_capacity(b);
    let mut entity_mask = Vec::with_capacity(b);

    for sample in batch {
        let enc = model.encode(&mut g, &bound, &sample.images, &sample.reviews, None)?;
        let (ce, hidden) = model.sample_ce(&mut g, &bound, &enc, &sample.target)?;
        ce_terms.push(ce);

        if use_image_side || use_text_side {
            let pooled_y = contrast::pool_rows(&mut g, hidden, None)?;
            pooled_targets.push(pooled_y);
            if use_image_side {
                let h_v = enc.h_images.ok_or_else(|| Error::EmptyInput {
                    what: "image slots".to_string(),
                })?;
                pooled_images.push(contrast::pool_rows(&mut g, h_v, None)?);
                if config.mode.entity_negatives() {
                    let corrupted = contrast::make_entity_negative(
                        &sample.target,
                        &sample.entity_spans,
                        entity_vocab,
                        vocab,
                        model.config.max_len,
                        entity_rng,
                    )?;
                    match corrupted {
                        Some(tokens) => {
                            let ent_hidden =
                                model.decode_target_hidden(&mut g, &bound, &enc, &tokens)?;
                            pooled_entities.push(contrast::pool_rows(&mut g, ent_hidden, None)?);
                            entity_mask.push(true);
                        }
                        None => {
                            // Placeholder row; masked out of the loss.
                            pooled_entities.push(pooled_y);
                            entity_mask.push(false);
                        }
                    }
                } else {
                    entity_mask.push(false);
                }
            }
            if use_text_side {
                let h_r = enc.h_reviews.ok_or_else(|| Error::EmptyInput {
                    what: "review slots".to_string(),
                })?;
                pooled_reviews.push(contrast::pool_rows(&mut g, h_r, None)?);
            }
        }
    }

    let ce_sum = g.sum_vars(&ce_terms)?;
    let ce_mean = g.scale(ce_sum, 1.0 / b as f64)?;

    let mut loss_terms = vec![ce_mean];
    let mut ccl_value = 0.0;
    let mut pcl_value = 0.0;

    if use_image_side {
        let v = contrast::stack_rows(&mut g, &pooled_images)?;
        let y = contrast::stack_rows(&mut g, &pooled_targets)?;
        let pv = heads.project(&mut g, &heads_bound, HEAD_IMAGES, v)?;
        let py = heads.project(&mut g, &heads_bound, HEAD_TARGET, y)?;
        let extras = if config.mode.entity_negatives() && entity_mask.iter().any(|&m| m) {
            let e = contrast::stack_rows(&mut g, &pooled_entities)?;
            let pe = heads.project(&mut g, &heads_bound, HEAD_TARGET, e)?;
            Some((pe, entity_mask.as_slice()))
        } else {
            None
        };
        let ccl = contrast::ccl_loss(&mut g, pv, py, extras, model.config.temperature)?;
        let ccl_mean = g.scale(ccl, 1.0 / b as f64)?;
        ccl_value = g.value(ccl_mean).item();
        loss_terms.push(g.scale(ccl_mean, model.config.lambda1)?);
    }

    if use_text_side {
        let r = contrast::stack_rows(&mut g, &pooled_reviews)?;
        let y = contrast::stack_rows(&mut g, &pooled_targets)?;
        let pr = heads.project(&mut g, &heads_bound, HEAD_REVIEWS, r)?;
        let py = heads.project(&mut g, &heads_bound, HEAD_TARGET, y)?;
        let alpha = if config.mode.history_weighting() {
            model.config.alpha
        } else {
            1.0
        };
        let histories: Vec<Vec<f64>> = batch.iter().map(|s| s.history_mean.clone()).collect();
        let pcl = contrast::pcl_loss(&mut g, pr, py, &histories, alpha, model.config.temperature)?;
        let pcl_mean = g.scale(pcl, 1.0 / b as f64)?;
        pcl_value = g.value(pcl_mean).item();
        loss_terms.push(g.scale(pcl_mean, model.config.lambda2)?);
    }

    let total = if loss_terms.len() == 1 {
        loss_terms[0]
    } else {
        g.sum_vars(&loss_terms)?
    };
    let ce_value = g.value(loss_terms[0]).item();
    let total_value = g.value(total).item();

    let grads = g.backward(total)?;
    model_opt.apply(&mut model.params, &bound, &grads)?;
    if use_image_side || use_text_side {
        heads_opt.apply(&mut heads.params, &heads_bound, &grads)?;
    }

    Ok(LossBreakdown {
        ce: ce_value,
        ccl: ccl_value,
        pcl: pcl_value,
        lambda1: model.config.lambda1,
        lambda2: model.config.lambda2,
        total: total_value,
    })
}
