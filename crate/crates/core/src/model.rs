//! Visually-aware explanation generator: projected image and review
//! features are fused by a joint self-attention encoder; an autoregressive
//! decoder with causal self-attention and encoder-decoder cross-attention
//! emits token sequences, trained by teacher forcing and decoded by
//! length-normalized beam search.
//!
//! Convention: stored target sequences end with EOS, and the decoder input
//! prefix starts with BOS, so a target of length L occupies exactly L
//! decoder positions.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var, MASK_NEG};
use crate::params::ParamMap;
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, PAD};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab: usize,
    pub image_dim: usize,
    pub review_dim: usize,
    /// Maximum decoder positions; generated sequences never exceed it.
    pub max_len: usize,
    pub max_images: usize,
    pub max_reviews: usize,
    /// Contrastive projection width.
    pub proj_dim: usize,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Weight of the cross-modal contrastive term.
    pub lambda1: f64,
    /// Weight of the personalized contrastive term.
    pub lambda2: f64,
    /// History-similarity reweighting base.
    pub alpha: f64,
}

impl ModelConfig {
    /// Desk-scale defaults; hyperparameters follow the reference settings
    /// (lambda1 = lambda2 = 0.2, alpha = e, temperature = 0.1).
    pub fn desk(vocab: usize, image_dim: usize, review_dim: usize) -> Self {
        ModelConfig {
            hidden: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            vocab,
            image_dim,
            review_dim,
            max_len: 64,
            max_images: 5,
            max_reviews: 10,
            proj_dim: 32,
            temperature: 0.1,
            lambda1: 0.2,
            lambda2: 0.2,
            alpha: std::f64::consts::E,
        }
    }

    /// Full-size preset mirroring the published configuration.
    pub fn paper_scale(vocab: usize, image_dim: usize, review_dim: usize) -> Self {
        ModelConfig {
            hidden: 768,
            heads: 12,
            enc_layers: 3,
            dec_layers: 12,
            proj_dim: 256,
            ..ModelConfig::desk(vocab, image_dim, review_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument {
                detail: format!(
                    "hidden {} must be divisible by heads {}",
                    self.hidden, self.heads
                ),
            });
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidArgument {
                detail: "temperature must be positive".to_string(),
            });
        }
        if self.alpha < 1.0 {
            return Err(Error::InvalidArgument {
                detail: "alpha must be >= 1".to_string(),
            });
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidArgument {
                detail: "loss weights must be non-negative".to_string(),
            });
        }
        if self.vocab <= 4 {
            return Err(Error::InvalidArgument {
                detail: "vocabulary must extend past the reserved ids".to_string(),
            });
        }
        if self.max_len == 0 || self.max_images == 0 {
            return Err(Error::InvalidArgument {
                detail: "max_len and max_images must be positive".to_string(),
            });
        }
        Ok(())
    }

    fn ffn_dim(&self) -> usize {
        self.hidden * 4
    }
}

pub type Bound = HashMap<String, Var>;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamMap,
}

fn uniform(rng: &mut ChaCha12Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn insert_linear(
    params: &mut ParamMap,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    let scale = (2.0 / fan_in as f64).sqrt();
    params.insert(
        name.to_string(),
        Tensor::matrix(fan_in, fan_out, uniform(rng, fan_in * fan_out, scale))?,
    )
}

fn insert_layer_norm(params: &mut ParamMap, prefix: &str, width: usize) -> Result<()> {
    params.insert(format!("{prefix}.g"), Tensor::vector(vec![1.0; width]))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![width]))
}

fn insert_attention(
    params: &mut ParamMap,
    prefix: &str,
    hidden: usize,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        insert_linear(params, &format!("{prefix}.{w}"), hidden, hidden, rng)?;
    }
    Ok(())
}

fn insert_ffn(
    params: &mut ParamMap,
    prefix: &str,
    hidden: usize,
    ffn: usize,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    insert_linear(params, &format!("{prefix}.w1"), hidden, ffn, rng)?;
    params.insert(format!("{prefix}.b1"), Tensor::zeros(vec![ffn]))?;
    insert_linear(params, &format!("{prefix}.w2"), ffn, hidden, rng)?;
    params.insert(format!("{prefix}.b2"), Tensor::zeros(vec![hidden]))
}

/// Encoder hidden states with slot presence for downstream masking.
pub struct EncoderOutput {
    pub joint: Var,
    pub h_images: Option<Var>,
    pub h_reviews: Option<Var>,
    pub present: Vec<bool>,
    pub n_images: usize,
    pub n_reviews: usize,
}

/// Causal mask: position i may attend to j <= i.
pub fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = MASK_NEG;
        }
    }
    Tensor::matrix(t, t, data).expect("square mask")
}

fn presence_mask(rows: usize, present: &[bool]) -> Option<Tensor> {
    if present.iter().all(|&p| p) {
        return None;
    }
    let cols = present.len();
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        for (j, &p) in present.iter().enumerate() {
            if !p {
                data[i * cols + j] = MASK_NEG;
            }
        }
    }
    Some(Tensor::matrix(rows, cols, data).expect("mask shape"))
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut p = ParamMap::new();
        let h = config.hidden;

        p.insert(
            "dec.tok_emb",
            Tensor::matrix(config.vocab, h, uniform(&mut rng, config.vocab * h, 0.02))?,
        )?;
        p.insert(
            "dec.pos_emb",
            Tensor::matrix(
                config.max_len,
                h,
                uniform(&mut rng, config.max_len * h, 0.02),
            )?,
        )?;
        insert_linear(&mut p, "enc.img_proj", config.image_dim, h, &mut rng)?;
        insert_linear(&mut p, "enc.rev_proj", config.review_dim, h, &mut rng)?;

        for i in 0..config.enc_layers {
            insert_layer_norm(&mut p, &format!("enc.{i}.ln1"), h)?;
            insert_attention(&mut p, &format!("enc.{i}.attn"), h, &mut rng)?;
            insert_layer_norm(&mut p, &format!("enc.{i}.ln2"), h)?;
            insert_ffn(
                &mut p,
                &format!("enc.{i}.ffn"),
                h,
                config.ffn_dim(),
                &mut rng,
            )?;
        }
        insert_layer_norm(&mut p, "enc.ln_f", h)?;

        for i in 0..config.dec_layers {
            insert_layer_norm(&mut p, &format!("dec.{i}.ln1"), h)?;
            insert_attention(&mut p, &format!("dec.{i}.self"), h, &mut rng)?;
            insert_layer_norm(&mut p, &format!("dec.{i}.ln2"), h)?;
            insert_attention(&mut p, &format!("dec.{i}.cross"), h, &mut rng)?;
            insert_layer_norm(&mut p, &format!("dec.{i}.ln3"), h)?;
            insert_ffn(
                &mut p,
                &format!("dec.{i}.ffn"),
                h,
                config.ffn_dim(),
                &mut rng,
            )?;
        }
        insert_layer_norm(&mut p, "dec.ln_f", h)?;
        // Zero output head: an untrained model emits a uniform distribution.
        p.insert("dec.out_w", Tensor::zeros(vec![h, config.vocab]))?;
        p.insert("dec.out_b", Tensor::zeros(vec![config.vocab]))?;

        Ok(Model { config, params: p })
    }

    /// Every parameter the config calls for, with its shape, in insertion
    /// order.
    pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let h = config.hidden;
        let ffn = config.ffn_dim();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| shapes.push((name, shape));
        let attention = |push: &mut dyn FnMut(String, Vec<usize>), prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                push(format!("{prefix}.{w}"), vec![h, h]);
            }
        };
        let layer_norm = |push: &mut dyn FnMut(String, Vec<usize>), prefix: &str| {
            push(format!("{prefix}.g"), vec![h]);
            push(format!("{prefix}.b"), vec![h]);
        };
        let ffn_block = |push: &mut dyn FnMut(String, Vec<usize>), prefix: &str| {
            push(format!("{prefix}.w1"), vec![h, ffn]);
            push(format!("{prefix}.b1"), vec![ffn]);
            push(format!("{prefix}.w2"), vec![ffn, h]);
            push(format!("{prefix}.b2"), vec![h]);
        };

        push("dec.tok_emb".to_string(), vec![config.vocab, h]);
        push("dec.pos_emb".to_string(), vec![config.max_len, h]);
        push("enc.img_proj".to_string(), vec![config.image_dim, h]);
        push("enc.rev_proj".to_string(), vec![config.review_dim, h]);
        for i in 0..config.enc_layers {
            layer_norm(&mut push, &format!("enc.{i}.ln1"));
            attention(&mut push, &format!("enc.{i}.attn"));
            layer_norm(&mut push, &format!("enc.{i}.ln2"));
            ffn_block(&mut push, &format!("enc.{i}.ffn"));
        }
        layer_norm(&mut push, "enc.ln_f");
        for i in 0..config.dec_layers {
            layer_norm(&mut push, &format!("dec.{i}.ln1"));
            attention(&mut push, &format!("dec.{i}.self"));
            layer_norm(&mut push, &format!("dec.{i}.ln2"));
            attention(&mut push, &format!("dec.{i}.cross"));
            layer_norm(&mut push, &format!("dec.{i}.ln3"));
            ffn_block(&mut push, &format!("dec.{i}.ffn"));
        }
        layer_norm(&mut push, "dec.ln_f");
        push("dec.out_w".to_string(), vec![h, config.vocab]);
        push("dec.out_b".to_string(), vec![config.vocab]);
        shapes
    }

    /// Rehydrate from checkpoint parameters, validating that every tensor
    /// the config calls for is present with its expected shape.
    pub fn from_params(config: ModelConfig, params: ParamMap) -> Result<Self> {
        config.validate()?;
        for (name, expected) in Model::param_shapes(&config) {
            let got = params.get(&name)?;
            if got.shape() != expected {
                return Err(Error::ShapeMismatch {
                    op: format!("checkpoint parameter {name}"),
                    detail: format!("{:?} vs expected {:?}", got.shape(), expected),
                });
            }
        }
        Ok(Model { config, params })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let mut bound = Bound::new();
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

    fn multi_head(
        &self,
        g: &mut Graph,
        bound: &Bound,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let q = g.matmul(q_in, bound[&format!("{prefix}.wq")])?;
        let k = g.matmul(kv_in, bound[&format!("{prefix}.wk")])?;
        let v = g.matmul(kv_in, bound[&format!("{prefix}.wv")])?;
        let dh = self.config.hidden / self.config.heads;
        let mut outs = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qs = g.slice_cols(q, lo, hi)?;
            let ks = g.slice_cols(k, lo, hi)?;
            let vs = g.slice_cols(v, lo, hi)?;
            let (o, _) = g.scaled_dot_attention(qs, ks, vs, mask)?;
            outs.push(o);
        }
        let cat = g.concat(&outs, 1)?;
        g.matmul(cat, bound[&format!("{prefix}.wo")])
    }

    fn ffn(&self, g: &mut Graph, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let a = g.matmul(x, bound[&format!("{prefix}.w1")])?;
        let a = g.add_bias(a, bound[&format!("{prefix}.b1")])?;
        let a = g.relu(a)?;
        let b = g.matmul(a, bound[&format!("{prefix}.w2")])?;
        g.add_bias(b, bound[&format!("{prefix}.b2")])
    }

    fn layer_norm(&self, g: &mut Graph, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        g.layer_norm(
            x,
            bound[&format!("{prefix}.g")],
            bound[&format!("{prefix}.b")],
        )
    }

    /// Project both modalities and run the joint self-attention stack.
    /// Image and review slots are sets: no positional signal is added.
    /// `present` marks live slots when padded inputs are supplied.
    pub fn encode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        images: &[Vec<f64>],
        reviews: &[Vec<f64>],
        present: Option<&[bool]>,
    ) -> Result<EncoderOutput> {
        let (n, k) = (images.len(), reviews.len());
        if n == 0 && k == 0 {
            return Err(Error::EmptyInput {
                what: "encoder inputs (no images and no reviews)".to_string(),
            });
        }
        if n > self.config.max_images {
            return Err(Error::InvalidArgument {
                detail: format!("{n} images exceed the cap of {}", self.config.max_images),
            });
        }
        if k > self.config.max_reviews {
            return Err(Error::InvalidArgument {
                detail: format!("{k} reviews exceed the cap of {}", self.config.max_reviews),
            });
        }
        let present: Vec<bool> = match present {
            Some(p) => {
                if p.len() != n + k {
                    return Err(Error::ShapeMismatch {
                        op: "encode".to_string(),
                        detail: format!("{} presence flags for {} slots", p.len(), n + k),
                    });
                }
                p.to_vec()
            }
            None => vec![true; n + k],
        };

        let mut slots = Vec::with_capacity(2);
        if n > 0 {
            for img in images {
                if img.len() != self.config.image_dim {
                    return Err(Error::DimMismatch {
                        expected: self.config.image_dim,
                        got: img.len(),
                    });
                }
            }
            let flat: Vec<f64> = images.iter().flatten().copied().collect();
            let v = g.constant(Tensor::matrix(n, self.config.image_dim, flat)?)?;
            slots.push(g.matmul(v, bound["enc.img_proj"])?);
        }
        if k > 0 {
            for rev in reviews {
                if rev.len() != self.config.review_dim {
                    return Err(Error::DimMismatch {
                        expected: self.config.review_dim,
                        got: rev.len(),
                    });
                }
            }
            let flat: Vec<f64> = reviews.iter().flatten().copied().collect();
            let r = g.constant(Tensor::matrix(k, self.config.review_dim, flat)?)?;
            slots.push(g.matmul(r, bound["enc.rev_proj"])?);
        }
        let mut x = if slots.len() == 1 {
            slots[0]
        } else {
            g.concat(&slots, 0)?
        };

        let mask = presence_mask(n + k, &present);
        for i in 0..self.config.enc_layers {
            let a = self.layer_norm(g, bound, &format!("enc.{i}.ln1"), x)?;
            let sa = self.multi_head(g, bound, &format!("enc.{i}.attn"), a, a, mask.as_ref())?;
            x = g.add(x, sa)?;
            let f = self.layer_norm(g, bound, &format!("enc.{i}.ln2"), x)?;
            let ff = self.ffn(g, bound, &format!("enc.{i}.ffn"), f)?;
            x = g.add(x, ff)?;
        }
        x = self.layer_norm(g, bound, "enc.ln_f", x)?;

        let h_images = if n > 0 {
            Some(g.slice_rows(x, 0, n)?)
        } else {
            None
        };
        let h_reviews = if k > 0 {
            Some(g.slice_rows(x, n, n + k)?)
        } else {
            None
        };
        Ok(EncoderOutput {
            joint: x,
            h_images,
            h_reviews,
            present,
            n_images: n,
            n_reviews: k,
        })
    }

    /// Decoder hidden states for a BOS-prefixed input, after the final
    /// layer norm. Causal over the prefix, cross-attending to live
    /// encoder slots only.
    pub fn decode_hidden(
        &self,
        g: &mut Graph,
        bound: &Bound,
        enc: &EncoderOutput,
        prefix: &[u32],
    ) -> Result<Var> {
        if prefix.is_empty() || prefix[0] != BOS {
            return Err(Error::InvalidArgument {
                detail: "decoder prefix must begin with BOS".to_string(),
            });
        }
        if prefix.len() > self.config.max_len {
            return Err(Error::InvalidArgument {
                detail: format!(
                    "prefix of {} exceeds max length {}",
                    prefix.len(),
                    self.config.max_len
                ),
            });
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::InvalidArgument {
                detail: format!("unknown token id {bad}"),
            });
        }
        let t = prefix.len();
        let ids: Vec<usize> = prefix.iter().map(|&x| x as usize).collect();
        let pos: Vec<usize> = (0..t).collect();
        let tok = g.embedding_lookup(bound["dec.tok_emb"], &ids)?;
        let pe = g.embedding_lookup(bound["dec.pos_emb"], &pos)?;
        let mut x = g.add(tok, pe)?;

        let self_mask = causal_mask(t);
        let cross_mask = presence_mask(t, &enc.present);
        for i in 0..self.config.dec_layers {
            let a = self.layer_norm(g, bound, &format!("dec.{i}.ln1"), x)?;
            let sa = self.multi_head(g, bound, &format!("dec.{i}.self"), a, a, Some(&self_mask))?;
            x = g.add(x, sa)?;
            let c = self.layer_norm(g, bound, &format!("dec.{i}.ln2"), x)?;
            let ca = self.multi_head(
                g,
                bound,
                &format!("dec.{i}.cross"),
                c,
                enc.joint,
                cross_mask.as_ref(),
            )?;
            x = g.add(x, ca)?;
            let f = self.layer_norm(g, bound, &format!("dec.{i}.ln3"), x)?;
            let ff = self.ffn(g, bound, &format!("dec.{i}.ffn"), f)?;
            x = g.add(x, ff)?;
        }
        self.layer_norm(g, bound, "dec.ln_f", x)
    }

    /// Vocabulary logits for every prefix position.
    pub fn logits_from_hidden(&self, g: &mut Graph, bound: &Bound, hidden: Var) -> Result<Var> {
        let z = g.matmul(hidden, bound["dec.out_w"])?;
        g.add_bias(z, bound["dec.out_b"])
    }

    /// Per-position vocabulary logits for a BOS-prefixed input.
    pub fn decode_logits(
        &self,
        g: &mut Graph,
        bound: &Bound,
        enc: &EncoderOutput,
        prefix: &[u32],
    ) -> Result<Var> {
        let hidden = self.decode_hidden(g, bound, enc, prefix)?;
        self.logits_from_hidden(g, bound, hidden)
    }

    /// Teacher-forcing loss and the decoder hidden states for one sample.
    /// `target` must end with EOS; it occupies exactly `target.len()`
    /// decoder positions.
    pub fn sample_ce(
        &self,
        g: &mut Graph,
        bound: &Bound,
        enc: &EncoderOutput,
        target: &[u32],
    ) -> Result<(Var, Var)> {
        if target.is_empty() {
            return Err(Error::EmptyInput {
                what: "target sequence".to_string(),
            });
        }
        if target.iter().all(|&t| t == PAD) {
            return Err(Error::InvalidArgument {
                detail: "target is all padding".to_string(),
            });
        }
        let mut prefix = Vec::with_capacity(target.len());
        prefix.push(BOS);
        prefix.extend_from_slice(&target[..target.len() - 1]);
        let hidden = self.decode_hidden(g, bound, enc, &prefix)?;
        let logits = self.logits_from_hidden(g, bound, hidden)?;
        let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
        let mask: Vec<bool> = target.iter().map(|&t| t != PAD).collect();
        let ce = g.cross_entropy(logits, &targets, &mask)?;
        Ok((ce, hidden))
    }

    /// Decoder hidden states for an alternative target sequence, teacher
    /// forced the same way as `sample_ce` but without the loss (used for
    /// entity-corrupted negatives).
    pub fn decode_target_hidden(
        &self,
        g: &mut Graph,
        bound: &Bound,
        enc: &EncoderOutput,
        target: &[u32],
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::EmptyInput {
                what: "target sequence".to_string(),
            });
        }
        let mut prefix = Vec::with_capacity(target.len());
        prefix.push(BOS);
        prefix.extend_from_slice(&target[..target.len() - 1]);
        self.decode_hidden(g, bound, enc, &prefix)
    }

    /// Mean per-sequence summed CE over a batch (inference-only graphs).
    pub fn ce_loss(&self, batch: &[(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<u32>)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyInput {
                what: "batch".to_string(),
            });
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let mut losses = Vec::with_capacity(batch.len());
        for (images, reviews, target) in batch {
            let enc = self.encode(&mut g, &bound, images, reviews, None)?;
            let (ce, _) = self.sample_ce(&mut g, &bound, &enc, target)?;
            losses.push(ce);
        }
        let total = g.sum_vars(&losses)?;
        let mean = g.scale(total, 1.0 / batch.len() as f64)?;
        Ok(g.value(mean).item())
    }

    /// Run the encoder once and extract its values for decoding loops.
    pub fn encode_values(
        &self,
        images: &[Vec<f64>],
        reviews: &[Vec<f64>],
    ) -> Result<(Tensor, Vec<bool>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let enc = self.encode(&mut g, &bound, images, reviews, None)?;
        Ok((g.value(enc.joint).clone(), enc.present))
    }

    /// Last-position logits for a prefix against precomputed encoder
    /// state. Shared by beam search and by independent decoders.
    pub fn step_logits(
        &self,
        enc_joint: &Tensor,
        present: &[bool],
        prefix: &[u32],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let joint = g.constant(enc_joint.clone())?;
        let enc = EncoderOutput {
            joint,
            h_images: None,
            h_reviews: None,
            present: present.to_vec(),
            n_images: 0,
            n_reviews: 0,
        };
        let hidden = self.decode_hidden(&mut g, &bound, &enc, prefix)?;
        let logits = self.logits_from_hidden(&mut g, &bound, hidden)?;
        let t = prefix.len();
        Ok(g.value(logits).row(t - 1).to_vec())
    }

    /// Beam search. Active hypotheses are pruned each step by cumulative
    /// log-probability (all active candidates share a length, and beam 1
    /// reduces exactly to stepwise argmax); finished hypotheses compete by
    /// length-normalized score `logp / tokens`. Control ids (BOS, PAD) are
    /// never proposed; EOS finishes a hypothesis. Ties break on lower
    /// token id, then lower beam index. Output excludes BOS/EOS and never
    /// exceeds `max_len - 1` tokens.
    pub fn generate(
        &self,
        images: &[Vec<f64>],
        reviews: &[Vec<f64>],
        beam_size: usize,
        max_len: usize,
    ) -> Result<Vec<u32>> {
        if beam_size == 0 {
            return Err(Error::InvalidArgument {
                detail: "beam size must be >= 1".to_string(),
            });
        }
        let max_len = max_len.min(self.config.max_len);
        let (enc_joint, present) = self.encode_values(images, reviews)?;

        #[derive(Clone)]
        struct Beam {
            tokens: Vec<u32>,
            logp: f64,
        }
        fn norm_score(b: &Beam) -> f64 {
            b.logp / (b.tokens.len().max(1)) as f64
        }

        let mut active = vec![Beam {
            tokens: Vec::new(),
            logp: 0.0,
        }];
        let mut finished: Vec<Beam> = Vec::new();

        // A prefix of max_len positions (BOS + max_len - 1 tokens) is the
        // longest the position table admits.
        while !active.is_empty() {
            let mut candidates: Vec<(f64, u32, usize, Beam)> = Vec::new();
            let mut still_active = Vec::new();
            for beam in active.drain(..) {
                if beam.tokens.len() + 1 >= max_len {
                    finished.push(beam);
                } else {
                    still_active.push(beam);
                }
            }
            for (bi, beam) in still_active.iter().enumerate() {
                let mut prefix = Vec::with_capacity(beam.tokens.len() + 1);
                prefix.push(BOS);
                prefix.extend_from_slice(&beam.tokens);
                let logits = self.step_logits(&enc_joint, &present, &prefix)?;
                let logprobs = log_softmax(&logits);
                for (tok, &lp) in logprobs.iter().enumerate() {
                    let tok = tok as u32;
                    if tok == BOS || tok == PAD {
                        continue;
                    }
                    let next = Beam {
                        tokens: beam.tokens.clone(),
                        logp: beam.logp + lp,
                    };
                    candidates.push((next.logp, tok, bi, next));
                }
            }
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            for (_, tok, _, mut beam) in candidates.into_iter().take(beam_size) {
                if tok == EOS {
                    finished.push(beam);
                } else {
                    beam.tokens.push(tok);
                    active.push(beam);
                }
            }
        }

        let mut best: Option<Beam> = None;
        for beam in finished {
            if best
                .as_ref()
                .map_or(true, |b| norm_score(&beam) > norm_score(b))
            {
                best = Some(beam);
            }
        }
        Ok(best.expect("at least one finished hypothesis").tokens)
    }
}

/// Log-softmax of one logits row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_denom = max + denom.ln();
    logits.iter().map(|&z| z - log_denom).collect()
}
