//! Seeded synthetic dataset generator.
//!
//! Fabricates a small world of businesses, users and food topics with the
//! structure every pipeline stage needs: topic-clustered image embeddings,
//! a shared-space token table used as a bag-of-tokens sentence encoder,
//! review records with entity spans, alignment annotations, fused user
//! profiles, and selection interactions whose ground truth comes from an
//! oracle kernel over the planted preferences.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::contrast::EntityVocab;
use crate::dataset::{AlignedPair, EntitySpan, Interaction, ReviewRecord, Sentence};
use crate::distill::LabeledPair;
use crate::dpp;
use crate::error::Result;
use crate::store::{EmbeddingKind, EmbeddingStore};
use crate::vocab::{tokenize, Vocabulary, EOS};

const ENTITIES: [&str; 12] = [
    "sushi", "burger", "pizza", "ramen", "taco", "pasta", "salad", "steak", "curry", "pancake",
    "waffle", "dumpling",
];
const ADJECTIVES: [&str; 10] = [
    "great", "fresh", "tasty", "crispy", "spicy", "sweet", "warm", "rich", "tender", "juicy",
];
const ADVERBS: [&str; 4] = ["really", "very", "quite", "so"];

#[derive(Debug, Clone)]
pub struct FixtureConfig {
    pub seed: u64,
    pub users: usize,
    pub businesses: usize,
    pub images_per_business: usize,
    /// Shared dimensionality of the image space and the token space.
    pub dim: usize,
    pub reviews_per_user: usize,
    pub history_len: usize,
    pub interactions_per_user: usize,
    pub favorite_topics: usize,
    pub selection_size: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            seed: 0,
            users: 50,
            businesses: 12,
            images_per_business: 10,
            dim: 16,
            reviews_per_user: 3,
            history_len: 4,
            interactions_per_user: 10,
            favorite_topics: 3,
            selection_size: 3,
        }
    }
}

/// Everything a pipeline run consumes, held in memory.
pub struct Fixture {
    pub config: FixtureConfig,
    pub vocab: Vocabulary,
    pub entity_vocab: EntityVocab,
    pub images: EmbeddingStore,
    pub reviews: EmbeddingStore,
    pub sentences: EmbeddingStore,
    pub profiles: EmbeddingStore,
    pub tokens: EmbeddingStore,
    pub records: Vec<ReviewRecord>,
    pub pairs: Vec<AlignedPair>,
    pub interactions: Vec<Interaction>,
    pub keyword_classes: BTreeMap<String, Vec<String>>,
}

fn random_unit(rng: &mut ChaCha12Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / norm).collect()
}

fn jitter(rng: &mut ChaCha12Rng, base: &[f64], scale: f64) -> Vec<f64> {
    base.iter()
        .map(|&v| v + rng.gen_range(-scale..scale))
        .collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Bag-of-tokens sentence embedding: the mean of the known token rows.
/// `None` when no token resolves.
pub fn embed_tokens(tokens: &[String], table: &EmbeddingStore) -> Option<Vec<f64>> {
    let mut acc = vec![0.0; table.dim()];
    let mut count = 0usize;
    for tok in tokens {
        if let Some(row) = table.row(tok) {
            for (j, &v) in row.iter().enumerate() {
                acc[j] += v as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    acc.iter_mut().for_each(|v| *v /= count as f64);
    Some(acc)
}

pub fn embed_text(text: &str, table: &EmbeddingStore) -> Option<Vec<f64>> {
    embed_tokens(&tokenize(text), table)
}

struct World {
    topic_dirs: Vec<Vec<f64>>,
    token_rows: Vec<(String, Vec<f32>)>,
}

fn build_world(rng: &mut ChaCha12Rng, dim: usize) -> World {
    let topic_dirs: Vec<Vec<f64>> = (0..ENTITIES.len()).map(|_| random_unit(rng, dim)).collect();
    let food_dir = random_unit(rng, dim);

    let mut token_rows: Vec<(String, Vec<f32>)> = Vec::new();
    for (t, entity) in ENTITIES.iter().enumerate() {
        let mut emb = jitter(rng, &topic_dirs[t], 0.05);
        for (j, f) in food_dir.iter().enumerate() {
            emb[j] += 0.35 * f;
        }
        token_rows.push((entity.to_string(), to_f32(&emb)));
    }
    let glue = [
        "the", "was", "i", "liked", "loved", "tasted", "service", "staff", "place", "here", "and",
        "again", "it", ".",
    ];
    for word in ADJECTIVES.iter().chain(ADVERBS.iter()).chain(glue.iter()) {
        let dir = random_unit(rng, dim);
        let emb: Vec<f64> = dir.iter().map(|v| v * 0.3).collect();
        token_rows.push((word.to_string(), to_f32(&emb)));
    }
    World {
        topic_dirs,
        token_rows,
    }
}

fn food_sentence(rng: &mut ChaCha12Rng, entity: &str) -> (String, EntitySpan) {
    let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
    let template = rng.gen_range(0..3);
    let (text, start) = match template {
        0 => (format!("the {entity} was {adj} ."), 1),
        1 => {
            let adv = ADVERBS[rng.gen_range(0..ADVERBS.len())];
            (format!("i {adv} liked the {entity} ."), 4)
        }
        _ => (format!("the {entity} tasted {adj} ."), 1),
    };
    let span = EntitySpan {
        start,
        end: start + 1,
        entity: entity.to_string(),
    };
    (text, span)
}

fn generic_sentence(rng: &mut ChaCha12Rng) -> String {
    let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
    match rng.gen_range(0..2) {
        0 => format!("service was {adj} ."),
        _ => format!("the staff here was {adj} ."),
    }
}

pub fn generate(config: &FixtureConfig) -> Result<Fixture> {
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let dim = config.dim;
    let world = build_world(&mut rng, dim);
    let token_table =
        EmbeddingStore::from_rows(EmbeddingKind::Token, dim, world.token_rows.clone())?;

    // Businesses: topic subsets and image pools clustered around them.
    let mut business_topics: Vec<Vec<usize>> = Vec::new();
    let mut image_rows: Vec<(String, Vec<f32>)> = Vec::new();
    let mut business_images: Vec<Vec<(String, usize, Vec<f64>)>> = Vec::new();
    for b in 0..config.businesses {
        let mut topics: Vec<usize> = (0..ENTITIES.len()).collect();
        topics.shuffle(&mut rng);
        topics.truncate(5);
        let mut images = Vec::new();
        for k in 0..config.images_per_business {
            let topic = topics[k % topics.len()];
            let emb = jitter(&mut rng, &world.topic_dirs[topic], 0.3);
            let id = format!("img_b{b}_{k}");
            image_rows.push((id.clone(), to_f32(&emb)));
            images.push((id, topic, emb));
        }
        business_topics.push(topics);
        business_images.push(images);
    }
    let images = EmbeddingStore::from_rows(EmbeddingKind::Image, dim, image_rows)?;

    // Users: favorite topics, history texts, own image means, profiles.
    let mut review_rows: Vec<(String, Vec<f32>)> = Vec::new();
    let mut profile_rows: Vec<(String, Vec<f32>)> = Vec::new();
    let mut user_favorites: Vec<Vec<usize>> = Vec::new();
    let mut user_history_ids: Vec<Vec<String>> = Vec::new();
    let mut user_fav_dir: Vec<Vec<f64>> = Vec::new();
    for u in 0..config.users {
        let mut favorites: Vec<usize> = (0..ENTITIES.len()).collect();
        favorites.shuffle(&mut rng);
        favorites.truncate(config.favorite_topics);

        let mut history_ids = Vec::new();
        let mut history_embs = Vec::new();
        for k in 0..config.history_len {
            let topic = favorites[k % favorites.len()];
            let (text, _) = food_sentence(&mut rng, ENTITIES[topic]);
            let emb = embed_text(&text, &token_table).expect("fixture sentences embed");
            let id = format!("h_u{u}_{k}");
            review_rows.push((id.clone(), to_f32(&emb)));
            history_ids.push(id);
            history_embs.push(emb);
        }

        // The user's own photos cluster around their favorite topics.
        let own_images: Vec<Vec<f64>> = favorites
            .iter()
            .map(|&t| jitter(&mut rng, &world.topic_dirs[t], 0.2))
            .collect();
        let profile = dpp::fuse_user_profile(&own_images, dim, &history_embs, dim);
        profile_rows.push((format!("prof_u{u}"), to_f32(&profile)));

        let mut fav_dir = vec![0.0; dim];
        for &t in &favorites {
            for (j, v) in world.topic_dirs[t].iter().enumerate() {
                fav_dir[j] += v / favorites.len() as f64;
            }
        }
        user_favorites.push(favorites);
        user_history_ids.push(history_ids);
        user_fav_dir.push(fav_dir);
    }
    let reviews = EmbeddingStore::from_rows(EmbeddingKind::ReviewText, dim, review_rows)?;
    let profiles = EmbeddingStore::from_rows(EmbeddingKind::UserProfile, 2 * dim, profile_rows)?;

    // Review records with annotated sentences.
    let mut records = Vec::new();
    let mut sentence_rows: Vec<(String, Vec<f32>)> = Vec::new();
    for u in 0..config.users {
        for r in 0..config.reviews_per_user {
            let review_id = format!("rev_u{u}_{r}");
            let b = rng.gen_range(0..config.businesses);
            // Prefer images of the user's favorite topics; fall back to any.
            let favored: Vec<&(String, usize, Vec<f64>)> = business_images[b]
                .iter()
                .filter(|(_, t, _)| user_favorites[u].contains(t))
                .collect();
            let pool: Vec<&(String, usize, Vec<f64>)> = if favored.is_empty() {
                business_images[b].iter().collect()
            } else {
                favored
            };
            let n_images = rng.gen_range(1..=3.min(pool.len()));
            let mut picked = pool.clone();
            picked.shuffle(&mut rng);
            picked.truncate(n_images);

            let mut sentences = Vec::new();
            let mut image_ids = Vec::new();
            for (idx, (img_id, topic, _)) in picked.iter().enumerate() {
                let (text, span) = food_sentence(&mut rng, ENTITIES[*topic]);
                let sid = format!("s_{review_id}_{idx}");
                let emb = embed_text(&text, &token_table).expect("fixture sentences embed");
                sentence_rows.push((sid.clone(), to_f32(&emb)));
                sentences.push(Sentence {
                    id: sid,
                    text,
                    entities: vec![span],
                });
                image_ids.push(img_id.clone());
            }
            if rng.gen_bool(0.4) {
                let text = generic_sentence(&mut rng);
                let sid = format!("s_{review_id}_{}", sentences.len());
                let emb = embed_text(&text, &token_table).expect("fixture sentences embed");
                sentence_rows.push((sid.clone(), to_f32(&emb)));
                sentences.push(Sentence {
                    id: sid,
                    text,
                    entities: vec![],
                });
            }
            records.push(ReviewRecord {
                review_id,
                user_id: format!("u{u}"),
                business_id: format!("b{b}"),
                history: user_history_ids[u].clone(),
                images: image_ids,
                sentences,
            });
        }
    }
    let sentences = EmbeddingStore::from_rows(EmbeddingKind::Sentence, dim, sentence_rows)?;

    // Alignment annotations: positives are matched (sentence, image) pairs
    // from one review; negatives mix generic sentences with mismatched
    // topics.
    let mut pairs = Vec::new();
    for record in &records {
        for sentence in &record.sentences {
            let topic = sentence.entities.first().map(|s| s.entity.clone());
            for img_id in &record.images {
                let img_topic = image_topic_of(img_id, &business_images);
                let label = match &topic {
                    Some(entity) => ENTITIES[img_topic] == entity,
                    None => false,
                };
                if label || rng.gen_bool(0.5) {
                    pairs.push(AlignedPair {
                        sentence_id: sentence.id.clone(),
                        image_id: img_id.clone(),
                        label: label as u8,
                    });
                }
            }
            // A mismatched-topic negative from another business.
            if let (Some(entity), true) = (&topic, rng.gen_bool(0.5)) {
                let ob = rng.gen_range(0..config.businesses);
                let (img_id, img_topic, _) =
                    &business_images[ob][rng.gen_range(0..business_images[ob].len())];
                if ENTITIES[*img_topic] != *entity {
                    pairs.push(AlignedPair {
                        sentence_id: sentence.id.clone(),
                        image_id: img_id.clone(),
                        label: 0,
                    });
                }
            }
        }
    }

    // Selection interactions; ground truth from the oracle kernel over the
    // planted favorite-topic direction.
    let mut interactions = Vec::new();
    for u in 0..config.users {
        let mut visited: Vec<usize> = (0..config.businesses).collect();
        visited.shuffle(&mut rng);
        visited.truncate(config.interactions_per_user.min(config.businesses));
        for &b in &visited {
            let pool_ids: Vec<String> = business_images[b]
                .iter()
                .map(|(id, _, _)| id.clone())
                .collect();
            let pool_embs: Vec<Vec<f64>> = business_images[b]
                .iter()
                .map(|(_, _, e)| e.clone())
                .collect();
            let oracle_rel: Vec<f64> = pool_embs
                .iter()
                .map(|e| {
                    let dot: f64 = e.iter().zip(&user_fav_dir[u]).map(|(a, b)| a * b).sum();
                    (2.0 * dot).exp()
                })
                .collect();
            let sim = dpp::similarity_matrix(&pool_embs)?;
            let kernel = dpp::kernel_from_scores(oracle_rel, sim)?;
            let selection = dpp::greedy_map(&kernel, config.selection_size)?;
            let ground_truth: Vec<String> = selection
                .indices
                .iter()
                .map(|&i| pool_ids[i].clone())
                .collect();
            interactions.push(Interaction {
                user_id: format!("u{u}"),
                business_id: format!("b{b}"),
                profile_id: format!("prof_u{u}"),
                pool: pool_ids,
                ground_truth,
            });
        }
    }

    // Vocabulary over everything the pipeline will tokenize.
    let mut corpus: Vec<String> = Vec::new();
    for record in &records {
        for s in &record.sentences {
            corpus.push(s.text.clone());
        }
    }
    for entity in ENTITIES {
        corpus.push(entity.to_string());
    }
    let vocab = Vocabulary::build(corpus);

    let mut keyword_classes = BTreeMap::new();
    keyword_classes.insert(
        "noun".to_string(),
        ENTITIES.iter().map(|s| s.to_string()).collect(),
    );
    keyword_classes.insert(
        "adj".to_string(),
        ADJECTIVES.iter().map(|s| s.to_string()).collect(),
    );
    keyword_classes.insert(
        "adv".to_string(),
        ADVERBS.iter().map(|s| s.to_string()).collect(),
    );

    Ok(Fixture {
        config: config.clone(),
        vocab,
        entity_vocab: EntityVocab {
            entities: ENTITIES.iter().map(|s| s.to_string()).collect(),
        },
        images,
        reviews,
        sentences,
        profiles,
        tokens: token_table,
        records,
        pairs,
        interactions,
        keyword_classes,
    })
}

fn image_topic_of(id: &str, business_images: &[Vec<(String, usize, Vec<f64>)>]) -> usize {
    for images in business_images {
        for (img_id, topic, _) in images {
            if img_id == id {
                return *topic;
            }
        }
    }
    unreachable!("fixture image ids always resolve")
}

impl Fixture {
    /// Write every artifact into a directory with fixed file names.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
        self.images.save(&dir.join("images.json"))?;
        self.reviews.save(&dir.join("reviews.json"))?;
        self.sentences.save(&dir.join("sentences.json"))?;
        self.profiles.save(&dir.join("profiles.json"))?;
        self.tokens.save(&dir.join("tokens.json"))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        self.entity_vocab.save(&dir.join("entities.txt"))?;
        crate::dataset::write_jsonl(&dir.join("dataset.jsonl"), &self.records)?;
        crate::dataset::write_jsonl(&dir.join("pairs.jsonl"), &self.pairs)?;
        crate::dataset::write_jsonl(&dir.join("interactions.jsonl"), &self.interactions)?;
        let classes = serde_json::to_string_pretty(&self.keyword_classes)
            .map_err(|e| crate::error::Error::malformed("keyword classes", e.to_string()))?;
        std::fs::write(dir.join("keyword_classes.json"), classes)
            .map_err(|e| crate::error::Error::io(dir.join("keyword_classes.json"), e))?;
        Ok(())
    }
}

/// Two Gaussian clusters in the concatenated (sentence, image) space:
/// linearly separable alignment pairs for classifier benchmarks.
pub fn separable_pairs(n: usize, half_dim: usize, seed: u64) -> Vec<LabeledPair> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dim = 2 * half_dim;
    let center = random_unit(&mut rng, dim);
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            let sign = if label { 1.0 } else { -1.0 };
            let features: Vec<f64> = center
                .iter()
                .map(|&c| sign * 1.2 * c + rng.gen_range(-0.45..0.45))
                .collect();
            LabeledPair { features, label }
        })
        .collect()
}

/// The fixed 8-sample overfit suite: tiny vocabulary, distinct inputs and
/// short targets.
pub fn overfit_suite(seed: u64) -> (Vec<crate::trainer::TrainSample>, Vocabulary, EntityVocab) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let texts = [
        "the sushi was great .",
        "i really liked the burger .",
        "the pizza tasted fresh .",
        "the ramen was warm .",
        "i so loved the taco .",
        "the pasta was rich .",
        "the salad tasted crispy .",
        "the steak was tender .",
    ];
    let entities = [
        "sushi", "burger", "pizza", "ramen", "taco", "pasta", "salad", "steak",
    ];
    let vocab = Vocabulary::build(texts.iter().map(|s| s.to_string()));
    let entity_vocab = EntityVocab {
        entities: entities.iter().map(|s| s.to_string()).collect(),
    };
    let samples = texts
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let mut target = vocab.encode(text);
            target.push(EOS);
            let tokens = tokenize(text);
            let pos = tokens.iter().position(|t| t == entities[i]).unwrap();
            let image = random_unit(&mut rng, 4);
            let review = random_unit(&mut rng, 4);
            crate::trainer::TrainSample {
                review_id: format!("overfit_{i}"),
                user_id: format!("u{i}"),
                business_id: "b0".to_string(),
                images: vec![image],
                reviews: vec![review.clone()],
                target,
                entity_spans: vec![EntitySpan {
                    start: pos,
                    end: pos + 1,
                    entity: entities[i].to_string(),
                }],
                history_mean: review,
            }
        })
        .collect();
    (samples, vocab, entity_vocab)
}
