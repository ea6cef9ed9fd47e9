//! Contrastive objectives over projected encoder/decoder states.
//!
//! Three projection heads (images, history reviews, target sequence) map
//! mean-pooled hidden states into a shared space. The cross-modal loss
//! contrasts image representations against target representations with an
//! optional entity-swapped hard negative per sample; the personalized loss
//! contrasts history representations against targets with in-batch
//! negatives reweighted by `alpha^(1 - sim(history_i, history_j))`, so
//! users with similar histories push each other less.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EntitySpan;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamMap;
use crate::store::cosine_sim;
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, EOS};

/// The three projection heads, each two FC layers with a ReLU between.
#[derive(Debug, Clone)]
pub struct ContrastHeads {
    pub params: ParamMap,
    pub hidden: usize,
    pub proj_dim: usize,
}

pub const HEAD_IMAGES: &str = "proj_v";
pub const HEAD_REVIEWS: &str = "proj_r";
pub const HEAD_TARGET: &str = "proj_y";

impl ContrastHeads {
    pub fn init(hidden: usize, proj_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        for head in [HEAD_IMAGES, HEAD_REVIEWS, HEAD_TARGET] {
            let s1 = (2.0 / hidden as f64).sqrt();
            let w1: Vec<f64> = (0..hidden * proj_dim)
                .map(|_| rng.gen_range(-s1..s1))
                .collect();
            params.insert(format!("{head}.w1"), Tensor::matrix(hidden, proj_dim, w1)?)?;
            params.insert(format!("{head}.b1"), Tensor::zeros(vec![proj_dim]))?;
            let s2 = (2.0 / proj_dim as f64).sqrt();
            let w2: Vec<f64> = (0..proj_dim * proj_dim)
                .map(|_| rng.gen_range(-s2..s2))
                .collect();
            params.insert(
                format!("{head}.w2"),
                Tensor::matrix(proj_dim, proj_dim, w2)?,
            )?;
            params.insert(format!("{head}.b2"), Tensor::zeros(vec![proj_dim]))?;
        }
        Ok(ContrastHeads {
            params,
            hidden,
            proj_dim,
        })
    }

    pub fn from_params(hidden: usize, proj_dim: usize, params: ParamMap) -> Self {
        ContrastHeads {
            params,
            hidden,
            proj_dim,
        }
    }

    pub fn bind(
        &self,
        g: &mut Graph,
        trainable: bool,
    ) -> Result<std::collections::HashMap<String, Var>> {
        let mut bound = std::collections::HashMap::new();
        for (name, t) in self.params.iter() {
            let v = if trainable {
                g.param(t.clone())?
            } else {
                g.constant(t.clone())?
            };
            bound.insert(name.to_string(), v);
        }
        Ok(bound)
    }

    /// FC → ReLU → FC over a batch of pooled vectors.
    pub fn project(
        &self,
        g: &mut Graph,
        bound: &std::collections::HashMap<String, Var>,
        head: &str,
        pooled: Var,
    ) -> Result<Var> {
        let a = g.matmul(pooled, bound[&format!("{head}.w1")])?;
        let a = g.add_bias(a, bound[&format!("{head}.b1")])?;
        let a = g.relu(a)?;
        let b = g.matmul(a, bound[&format!("{head}.w2")])?;
        g.add_bias(b, bound[&format!("{head}.b2")])
    }
}

/// Mean-pool the live rows of a hidden-state matrix to one vector.
pub fn pool_rows(g: &mut Graph, hidden: Var, present: Option<&[bool]>) -> Result<Var> {
    match present {
        Some(keep) => g.masked_mean_rows(hidden, keep),
        None => g.mean_pool(hidden, 0),
    }
}

/// Stack per-sample pooled vectors into a batch matrix.
pub fn stack_rows(g: &mut Graph, rows: &[Var]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::EmptyInput {
            what: "batch rows".to_string(),
        });
    }
    let width = g.value(rows[0]).len();
    let mut mats = Vec::with_capacity(rows.len());
    for &r in rows {
        mats.push(g.reshape(r, vec![1, width])?);
    }
    g.concat(&mats, 0)
}

/// Temperature-scaled InfoNCE between matched anchor/target rows, with
/// optional negative weights and optional per-sample extra negatives.
pub fn info_nce(
    g: &mut Graph,
    anchors: Var,
    targets: Var,
    temperature: f64,
    weights: Option<&Tensor>,
    extra_negatives: Option<(Var, &[bool])>,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument {
            detail: format!("temperature {temperature} must be positive"),
        });
    }
    if g.value(anchors).shape() != g.value(targets).shape() {
        return Err(Error::ShapeMismatch {
            op: "info_nce".to_string(),
            detail: format!(
                "anchors {:?} vs targets {:?}",
                g.value(anchors).shape(),
                g.value(targets).shape()
            ),
        });
    }
    let an = g.row_l2_normalize(anchors)?;
    let tn = g.row_l2_normalize(targets)?;
    let tt = g.transpose(tn)?;
    let cos = g.matmul(an, tt)?;
    let sim = g.scale(cos, 1.0 / temperature)?;
    let extra = match extra_negatives {
        Some((ent, mask)) => {
            let en = g.row_l2_normalize(ent)?;
            let dots = g.row_dot(an, en)?;
            let scaled = g.scale(dots, 1.0 / temperature)?;
            Some((scaled, mask))
        }
        None => None,
    };
    g.info_nce(sim, weights, extra.as_ref().map(|(v, m)| (*v, *m)))
}

/// Cross-modal loss: images against targets, plus the entity-swapped
/// negative where one exists. With no entity negatives this is exactly the
/// vanilla contrastive loss.
pub fn ccl_loss(
    g: &mut Graph,
    proj_images: Var,
    proj_targets: Var,
    proj_entity_negatives: Option<(Var, &[bool])>,
    temperature: f64,
) -> Result<Var> {
    info_nce(
        g,
        proj_images,
        proj_targets,
        temperature,
        None,
        proj_entity_negatives,
    )
}

/// Negative-pair weights from frozen input-history embeddings:
/// `w_ij = alpha^(1 - sim(h_i, h_j))`, symmetric, in `[1, alpha]`.
pub fn history_weights(history_means: &[Vec<f64>], alpha: f64) -> Result<Tensor> {
    if alpha < 1.0 {
        return Err(Error::InvalidArgument {
            detail: format!("alpha {alpha} must be >= 1"),
        });
    }
    let b = history_means.len();
    if b == 0 {
        return Err(Error::EmptyInput {
            what: "history means".to_string(),
        });
    }
    let mut w = vec![1.0; b * b];
    for i in 0..b {
        for j in 0..i {
            let sim = cosine_sim(&history_means[i], &history_means[j])?;
            let weight = alpha.powf(1.0 - sim);
            w[i * b + j] = weight;
            w[j * b + i] = weight;
        }
    }
    Tensor::matrix(b, b, w)
}

/// Personalized loss: history representations against targets with
/// history-similarity reweighted negatives. `alpha = 1` reduces to the
/// unweighted contrastive loss.
pub fn pcl_loss(
    g: &mut Graph,
    proj_reviews: Var,
    proj_targets: Var,
    history_means: &[Vec<f64>],
    alpha: f64,
    temperature: f64,
) -> Result<Var> {
    let weights = history_weights(history_means, alpha)?;
    info_nce(
        g,
        proj_reviews,
        proj_targets,
        temperature,
        Some(&weights),
        None,
    )
}

/// Entity tokens ready for splicing into targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntityVocab {
    pub entities: Vec<String>,
}

impl EntityVocab {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entities: Vec<String> = raw
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Ok(EntityVocab { entities })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.entities.join("\n") + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Replace every entity span in the target with a different, uniformly
/// sampled entity, keeping the trailing EOS and the length cap. Returns
/// `None` when the record has no spans (the sample then contributes no
/// entity negative).
pub fn make_entity_negative(
    target: &[u32],
    spans: &[EntitySpan],
    entity_vocab: &EntityVocab,
    vocab: &Vocabulary,
    cap: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Option<Vec<u32>>> {
    if spans.is_empty() {
        return Ok(None);
    }
    if entity_vocab.entities.len() < 2 {
        return Err(Error::InvalidArgument {
            detail: "entity vocabulary needs at least 2 entities".to_string(),
        });
    }
    let has_eos = target.last() == Some(&EOS);
    let content_len = if has_eos {
        target.len() - 1
    } else {
        target.len()
    };

    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| s.start);
    let mut prev_end = 0;
    for s in &sorted {
        if s.start < prev_end || s.end <= s.start || s.end > content_len {
            return Err(Error::InvalidArgument {
                detail: format!(
                    "bad entity span [{}, {}) in target of {content_len}",
                    s.start, s.end
                ),
            });
        }
        prev_end = s.end;
    }

    let mut out: Vec<u32> = Vec::with_capacity(target.len());
    let mut cursor = 0;
    for span in sorted {
        out.extend_from_slice(&target[cursor..span.start]);
        let alternatives: Vec<&String> = entity_vocab
            .entities
            .iter()
            .filter(|e| **e != span.entity)
            .collect();
        let pick = alternatives[rng.gen_range(0..alternatives.len())];
        out.extend(vocab.encode(pick));
        cursor = span.end;
    }
    out.extend_from_slice(&target[cursor..content_len]);
    out.truncate(cap.saturating_sub(1).max(1));
    out.push(EOS);
    Ok(Some(out))
}

/// Per-batch loss components: `total = ce + lambda1*ccl + lambda2*pcl`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ccl: f64,
    pub pcl: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

pub fn total_loss(ce: f64, ccl: f64, pcl: f64, lambda1: f64, lambda2: f64) -> LossBreakdown {
    LossBreakdown {
        ce,
        ccl,
        pcl,
        lambda1,
        lambda2,
        total: ce + lambda1 * ccl + lambda2 * pcl,
    }
}
