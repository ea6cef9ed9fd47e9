//! Personalized diverse image-set selection.
//!
//! Two small MLP heads embed the fused user profile and each candidate
//! image into a shared space; relevance is the exponentiated dot product,
//! which keeps the kernel `L = Diag(r) S Diag(r)` positive semi-definite
//! for any scores. Greedy MAP inference picks the subset with the largest
//! incremental log-det gains, and training maximizes the likelihood
//! `log det(L_GT) - log det(L + I)` of observed ground-truth subsets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamMap;
use crate::store::cosine_sim;
use crate::tensor::Tensor;

/// Minimum squared Cholesky pivot for an item to remain selectable.
const SELECT_TOL: f64 = 1e-12;

/// Layer widths for the two relevance heads. Both end in the same output
/// width so the dot product is defined.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RelevanceConfig {
    pub user_input: usize,
    pub image_input: usize,
    pub hidden: Vec<usize>,
}

impl RelevanceConfig {
    /// Desk-scale default: a 64→32→16 pyramid.
    pub fn desk(user_input: usize, image_input: usize) -> Self {
        RelevanceConfig {
            user_input,
            image_input,
            hidden: vec![64, 32, 16],
        }
    }

    /// Full-size preset: profile 1024→512→512→256→128 and image
    /// 512→512→512→256→128.
    pub fn paper_scale() -> Self {
        RelevanceConfig {
            user_input: 1024,
            image_input: 512,
            hidden: vec![512, 512, 256, 128],
        }
    }

    fn chain(&self, input: usize) -> Vec<usize> {
        let mut c = vec![input];
        c.extend(&self.hidden);
        c
    }

    pub fn output_dim(&self) -> usize {
        *self.hidden.last().expect("hidden chain never empty")
    }
}

/// The two relevance heads with named parameters.
#[derive(Debug, Clone)]
pub struct RelevanceModel {
    pub config: RelevanceConfig,
    pub params: ParamMap,
}

fn init_mlp(
    params: &mut ParamMap,
    prefix: &str,
    chain: &[usize],
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    use rand::Rng;
    for i in 0..chain.len() - 1 {
        let (fan_in, fan_out) = (chain[i], chain[i + 1]);
        let scale = (2.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        params.insert(
            format!("{prefix}.{i}.w"),
            Tensor::matrix(fan_in, fan_out, w)?,
        )?;
        params.insert(format!("{prefix}.{i}.b"), Tensor::zeros(vec![fan_out]))?;
    }
    Ok(())
}

/// Forward an MLP chain over a constant-or-bound input matrix.
fn mlp_forward(
    g: &mut Graph,
    bound: &std::collections::HashMap<String, Var>,
    prefix: &str,
    layers: usize,
    mut x: Var,
) -> Result<Var> {
    for i in 0..layers {
        let w = bound[&format!("{prefix}.{i}.w")];
        let b = bound[&format!("{prefix}.{i}.b")];
        x = g.matmul(x, w)?;
        x = g.add_bias(x, b)?;
        if i + 1 < layers {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

impl RelevanceModel {
    pub fn init(config: RelevanceConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        init_mlp(
            &mut params,
            "user",
            &config.chain(config.user_input),
            &mut rng,
        )?;
        init_mlp(
            &mut params,
            "image",
            &config.chain(config.image_input),
            &mut rng,
        )?;
        Ok(RelevanceModel { config, params })
    }

    /// Rehydrate from checkpoint parameters, validating names and shapes
    /// against what the config calls for.
    pub fn from_params(config: RelevanceConfig, params: ParamMap) -> Result<Self> {
        let reference = RelevanceModel::init(config.clone(), 0)?;
        for (name, expected) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != expected.shape() {
                return Err(Error::ShapeMismatch {
                    op: format!("checkpoint parameter {name}"),
                    detail: format!("{:?} vs expected {:?}", got.shape(), expected.shape()),
                });
            }
        }
        Ok(RelevanceModel { config, params })
    }

    fn bind(
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

    fn layer_count(&self) -> usize {
        self.config.hidden.len()
    }

    /// Relevance scores `r_i = exp(<user_head(profile), image_head(v_i)>)`.
    pub fn relevance_scores(&self, profile: &[f64], candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::EmptyInput {
                what: "candidate set".to_string(),
            });
        }
        if profile.len() != self.config.user_input {
            return Err(Error::DimMismatch {
                expected: self.config.user_input,
                got: profile.len(),
            });
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let r = self.scores_in_graph(&mut g, &bound, profile, candidates)?;
        Ok(g.value(r).data().to_vec())
    }

    fn scores_in_graph(
        &self,
        g: &mut Graph,
        bound: &std::collections::HashMap<String, Var>,
        profile: &[f64],
        candidates: &[Vec<f64>],
    ) -> Result<Var> {
        let n = candidates.len();
        for c in candidates {
            if c.len() != self.config.image_input {
                return Err(Error::DimMismatch {
                    expected: self.config.image_input,
                    got: c.len(),
                });
            }
        }
        let p = g.constant(Tensor::matrix(1, profile.len(), profile.to_vec())?)?;
        let flat: Vec<f64> = candidates.iter().flatten().copied().collect();
        let x = g.constant(Tensor::matrix(n, self.config.image_input, flat)?)?;
        let layers = self.layer_count();
        let u = mlp_forward(g, bound, "user", layers, p)?;
        let imgs = mlp_forward(g, bound, "image", layers, x)?;
        let ut = g.transpose(u)?;
        let scores = g.matmul(imgs, ut)?;
        let scores = g.reshape(scores, vec![n])?;
        g.exp(scores)
    }
}

/// Relevance-weighted similarity kernel over one candidate pool.
#[derive(Debug, Clone)]
pub struct DppKernel {
    pub l: Tensor,
    pub relevance: Vec<f64>,
    pub similarity: Tensor,
}

impl DppKernel {
    pub fn size(&self) -> usize {
        self.relevance.len()
    }
}

/// Cosine similarity matrix of a candidate pool.
pub fn similarity_matrix(candidates: &[Vec<f64>]) -> Result<Tensor> {
    let n = candidates.len();
    if n == 0 {
        return Err(Error::EmptyInput {
            what: "candidate set".to_string(),
        });
    }
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        s[i * n + i] = 1.0;
        for j in 0..i {
            let c = cosine_sim(&candidates[i], &candidates[j])?;
            s[i * n + j] = c;
            s[j * n + i] = c;
        }
    }
    Tensor::matrix(n, n, s)
}

/// Kernel from raw relevance scores and a similarity matrix:
/// `L_ij = r_i * S_ij * r_j`.
pub fn kernel_from_scores(relevance: Vec<f64>, similarity: Tensor) -> Result<DppKernel> {
    let n = relevance.len();
    if similarity.shape() != [n, n] {
        return Err(Error::ShapeMismatch {
            op: "kernel_from_scores".to_string(),
            detail: format!("similarity {:?} for {n} scores", similarity.shape()),
        });
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            l[i * n + j] = relevance[i] * similarity.at(i, j) * relevance[j];
        }
    }
    Ok(DppKernel {
        l: Tensor::matrix(n, n, l)?,
        relevance,
        similarity,
    })
}

/// Score candidates against a user profile and assemble the kernel.
pub fn build_kernel(
    profile: &[f64],
    candidates: &[Vec<f64>],
    model: &RelevanceModel,
) -> Result<DppKernel> {
    let relevance = model.relevance_scores(profile, candidates)?;
    let similarity = similarity_matrix(candidates)?;
    kernel_from_scores(relevance, similarity)
}

/// Greedy MAP selection: item order and the log-det gain of each pick.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub gains: Vec<f64>,
}

impl Selection {
    pub fn log_det(&self) -> f64 {
        self.gains.iter().sum()
    }
}

/// Greedy MAP inference via incremental Cholesky gains.
///
/// Each step adds the item maximizing `log det(L_{S∪{i}}) - log det(L_S)`,
/// stopping at `k` items or when no remaining item keeps the submatrix
/// positive definite. Ties break toward the lowest index.
pub fn greedy_map(kernel: &DppKernel, k: usize) -> Result<Selection> {
    if k == 0 {
        return Err(Error::InvalidArgument {
            detail: "greedy_map requires k >= 1".to_string(),
        });
    }
    let n = kernel.size();
    let l = &kernel.l;
    let mut d2: Vec<f64> = (0..n).map(|i| l.at(i, i)).collect();
    let mut basis: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut available = vec![true; n];
    let mut selection = Selection {
        indices: Vec::new(),
        gains: Vec::new(),
    };

    while selection.indices.len() < k.min(n) {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if available[i] && d2[i] > SELECT_TOL && best.map_or(true, |b| d2[i] > d2[b]) {
                best = Some(i);
            }
        }
        let Some(j) = best else { break };
        available[j] = false;
        selection.indices.push(j);
        selection.gains.push(d2[j].ln());
        if selection.indices.len() == k {
            break;
        }
        let denom = d2[j].sqrt();
        let cj = basis[j].clone();
        for i in 0..n {
            if !available[i] {
                continue;
            }
            let dot: f64 = cj.iter().zip(&basis[i]).map(|(a, b)| a * b).sum();
            let e = (l.at(j, i) - dot) / denom;
            basis[i].push(e);
            d2[i] -= e * e;
        }
    }
    Ok(selection)
}

/// Precision/recall/F1 of a selected id set against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn rank_metrics(selected: &[String], ground_truth: &[String]) -> Result<RankMetrics> {
    if ground_truth.is_empty() {
        return Err(Error::EmptyInput {
            what: "ground truth".to_string(),
        });
    }
    let gt: std::collections::HashSet<&str> = ground_truth.iter().map(String::as_str).collect();
    let hits = selected.iter().filter(|s| gt.contains(s.as_str())).count() as f64;
    let precision = if selected.is_empty() {
        0.0
    } else {
        hits / selected.len() as f64
    };
    let recall = hits / gt.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(RankMetrics {
        precision,
        recall,
        f1,
    })
}

/// Average pairwise dissimilarity of the selected images.
pub fn div_at_k(images: &[Vec<f64>]) -> Result<f64> {
    let k = images.len();
    if k < 2 {
        return Err(Error::InvalidArgument {
            detail: "diversity undefined for fewer than 2 images".to_string(),
        });
    }
    let mut total = 0.0;
    for m in 0..k {
        for n in (m + 1)..k {
            total += 1.0 - cosine_sim(&images[m], &images[n])?;
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}

/// Fused user profile: per-modality averages concatenated, images first.
/// An empty modality contributes zeros of its width.
pub fn fuse_user_profile(
    images: &[Vec<f64>],
    image_dim: usize,
    reviews: &[Vec<f64>],
    review_dim: usize,
) -> Vec<f64> {
    let mut profile = vec![0.0; image_dim + review_dim];
    if !images.is_empty() {
        for img in images {
            for (j, v) in img.iter().enumerate() {
                profile[j] += v / images.len() as f64;
            }
        }
    }
    if !reviews.is_empty() {
        for rev in reviews {
            for (j, v) in rev.iter().enumerate() {
                profile[image_dim + j] += v / reviews.len() as f64;
            }
        }
    }
    profile
}

/// One selection training case; `sim` is precomputed once per pool.
#[derive(Debug, Clone)]
pub struct InteractionData {
    pub profile: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub sim: Tensor,
    pub ground_truth: Vec<usize>,
}

impl InteractionData {
    pub fn new(
        profile: Vec<f64>,
        candidates: Vec<Vec<f64>>,
        ground_truth: Vec<usize>,
    ) -> Result<Self> {
        if ground_truth.is_empty() {
            return Err(Error::EmptyInput {
                what: "ground-truth subset".to_string(),
            });
        }
        if let Some(&bad) = ground_truth.iter().find(|&&i| i >= candidates.len()) {
            return Err(Error::InvalidArgument {
                detail: format!(
                    "ground-truth index {bad} outside pool of {}",
                    candidates.len()
                ),
            });
        }
        let sim = similarity_matrix(&candidates)?;
        Ok(InteractionData {
            profile,
            candidates,
            sim,
            ground_truth,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DppTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for DppTrainConfig {
    fn default() -> Self {
        DppTrainConfig {
            epochs: 300,
            lr: 1e-3,
            batch: 512,
            seed: 0,
        }
    }
}

/// Maximize subset log-likelihood with Adam. Returns mean negative
/// log-likelihood per epoch. Deterministic for a fixed seed.
pub fn train_relevance(
    model: &mut RelevanceModel,
    data: &[InteractionData],
    config: &DppTrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput {
            what: "interactions".to_string(),
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut optimizers: Vec<AdamW> = model
        .params
        .iter()
        .map(|(_, t)| AdamW::new(AdamWConfig::adam(config.lr), t.len()))
        .collect();

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch.max(1)) {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true)?;
            let mut logliks = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let case = &data[idx];
                let r = model.scores_in_graph(&mut g, &bound, &case.profile, &case.candidates)?;
                let ll = g.dpp_loglik(r, &case.sim, &case.ground_truth)?;
                logliks.push(ll);
            }
            let total = g.sum_vars(&logliks)?;
            let loss = g.scale(total, -1.0 / chunk.len() as f64)?;
            epoch_loss += g.value(loss).item() * chunk.len() as f64;
            let grads = g.backward(loss)?;
            for (i, name) in model.params.names().to_vec().iter().enumerate() {
                let var = bound[name];
                let shape = model.params.get(name)?.shape().to_vec();
                let grad = grads.get_or_zeros(var, &shape);
                optimizers[i].step(model.params.get_mut(name)?, &grad)?;
            }
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
    }
    Ok(epoch_losses)
}
