//! The pipeline commands: fixture | distill | select-train | select |
//! train | generate | evaluate. Each command loads its inputs, runs one
//! stage, writes artifacts plus a JSON report, and records a run manifest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use showcase_core::contrast::{ContrastHeads, EntityVocab};
use showcase_core::dataset::{
    read_jsonl, write_jsonl, AlignedPair, GenerationRecord, Interaction, ReviewRecord,
    ShowcaseRecord, TargetRecord,
};
use showcase_core::distill::{
    self, assemble_pairs, train_classifier, AlignmentClassifier, LabeledPair,
};
use showcase_core::dpp::{self, DppTrainConfig, InteractionData, RelevanceConfig, RelevanceModel};
use showcase_core::fixture;
use showcase_core::metrics;
use showcase_core::model::Model;
use showcase_core::params::ParamMap;
use showcase_core::store::EmbeddingStore;
use showcase_core::tensor::Tensor;
use showcase_core::trainer::{self, LossMode, TrainConfig};
use showcase_core::vocab::Vocabulary;

use crate::config::PipelineConfig;
use crate::manifest::ManifestBuilder;

/// Ratio -> percentage with two decimals, the report formatting.
pub fn pct(x: f64) -> f64 {
    (x * 10000.0).round() / 100.0
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn write_report(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn cmd_fixture(config: &PipelineConfig, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = ManifestBuilder::new("fixture", seed, config);
    let fixture_config = fixture::FixtureConfig {
        seed: seed.unwrap_or(0),
        users: config.fixture.users,
        businesses: config.fixture.businesses,
        images_per_business: config.fixture.images_per_business,
        dim: config.fixture.dim,
        reviews_per_user: config.fixture.reviews_per_user,
        history_len: config.fixture.history_len,
        interactions_per_user: config.fixture.interactions_per_user,
        favorite_topics: config.fixture.favorite_topics,
        selection_size: config.dpp.k,
    };
    let fixture = fixture::generate(&fixture_config)?;
    let dir = if config.paths.data_dir.is_absolute() {
        config.paths.data_dir.clone()
    } else {
        out.join(&config.paths.data_dir)
    };
    fixture.write(&dir)?;
    println!(
        "fixture: {} users, {} businesses, {} records, {} pairs, {} interactions -> {}",
        fixture_config.users,
        fixture_config.businesses,
        fixture.records.len(),
        fixture.pairs.len(),
        fixture.interactions.len(),
        dir.display()
    );
    for name in [
        "images.json",
        "reviews.json",
        "sentences.json",
        "profiles.json",
        "tokens.json",
        "vocab.txt",
        "entities.txt",
        "dataset.jsonl",
        "pairs.jsonl",
        "interactions.jsonl",
        "keyword_classes.json",
    ] {
        manifest.output(&dir.join(name));
    }
    manifest.write(out)?;
    Ok(())
}

fn split_8_1_1(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    (train, val, test)
}

pub fn cmd_distill(config: &PipelineConfig, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = ManifestBuilder::new("distill", seed, config);
    let paths = &config.paths;
    let pairs_path = paths.input(out, &paths.pairs);
    let sentences_path = paths.input(out, &paths.sentences);
    let images_path = paths.input(out, &paths.images);
    let dataset_path = paths.input(out, &paths.dataset);
    for p in [&pairs_path, &sentences_path, &images_path, &dataset_path] {
        manifest.input(p)?;
    }

    let pairs: Vec<AlignedPair> = read_jsonl(&pairs_path)?;
    if pairs.is_empty() {
        bail!(showcase_core::Error::EmptyInput {
            what: "annotated pairs".to_string()
        });
    }
    let sentences = EmbeddingStore::load(&sentences_path)?;
    let images = EmbeddingStore::load(&images_path)?;
    let records: Vec<ReviewRecord> = read_jsonl(&dataset_path)?;
    if records.is_empty() {
        bail!(showcase_core::Error::EmptyInput {
            what: "review corpus".to_string()
        });
    }

    let labeled = assemble_pairs(&pairs, &sentences, &images)?;
    let (train_idx, val_idx, test_idx) = split_8_1_1(labeled.len(), config.distill.seed);
    let pick =
        |idx: &[usize]| -> Vec<LabeledPair> { idx.iter().map(|&i| labeled[i].clone()).collect() };
    let train_set = pick(&train_idx);
    let val_set = pick(&val_idx);
    let test_set = pick(&test_idx);

    let classifier = train_classifier(
        &train_set,
        sentences.dim(),
        config.distill.epochs,
        config.distill.lr,
        config.distill.seed,
    )?;
    let val_eval = distill::eval_classifier(&classifier, &val_set)?;
    let test_eval = distill::eval_classifier(&classifier, &test_set)?;

    // Distill the full review corpus.
    let mut kept = Vec::new();
    for record in &records {
        kept.extend(distill::distill_review(
            record,
            config.distill.threshold,
            &classifier,
            &sentences,
            &images,
        )?);
    }
    let targets = distill::assemble_targets(&records, &kept);

    let explanations_path = paths.artifact(out, &paths.explanations);
    write_jsonl(&explanations_path, &kept)?;
    let targets_path = paths.artifact(out, &paths.targets);
    write_jsonl(&targets_path, &targets)?;

    let classifier_path = paths.artifact(out, &paths.classifier);
    save_classifier(&classifier, &classifier_path)?;

    let report = serde_json::json!({
        "train_pairs": train_set.len(),
        "val_pairs": val_set.len(),
        "test_pairs": test_set.len(),
        "val_auc": round2(val_eval.auc * 100.0) / 100.0,
        "val_f1": round2(val_eval.f1 * 100.0) / 100.0,
        "auc": round2(test_eval.auc * 100.0) / 100.0,
        "f1": round2(test_eval.f1 * 100.0) / 100.0,
        "threshold": config.distill.threshold,
        "kept_pairs": kept.len(),
        "target_reviews": targets.len(),
    });
    let report_path = out.join("distill_report.json");
    write_report(&report_path, &report)?;
    println!(
        "distill: AUC {:.3} F1 {:.3} on {} test pairs; kept {} pairs across {} reviews",
        test_eval.auc,
        test_eval.f1,
        test_set.len(),
        kept.len(),
        targets.len()
    );

    manifest.output(&explanations_path);
    manifest.output(&targets_path);
    manifest.output(&classifier_path);
    manifest.output(&report_path);
    manifest.write(out)?;
    Ok(())
}

fn save_classifier(c: &AlignmentClassifier, path: &Path) -> anyhow::Result<()> {
    let mut params = ParamMap::new();
    params.insert("weights", Tensor::vector(c.weights.clone()))?;
    params.insert("bias", Tensor::vector(vec![c.bias]))?;
    params.save(
        path,
        serde_json::json!({
            "sentence_dim": c.sentence_dim,
            "image_dim": c.image_dim,
        }),
    )?;
    Ok(())
}

fn load_classifier(path: &Path) -> anyhow::Result<AlignmentClassifier> {
    let (params, meta) = ParamMap::load(path)?;
    let sentence_dim = meta["sentence_dim"]
        .as_u64()
        .ok_or_else(|| anyhow!("classifier checkpoint missing sentence_dim"))?
        as usize;
    let image_dim = meta["image_dim"]
        .as_u64()
        .ok_or_else(|| anyhow!("classifier checkpoint missing image_dim"))?
        as usize;
    Ok(AlignmentClassifier {
        weights: params.get("weights")?.data().to_vec(),
        bias: params.get("bias")?.data()[0],
        sentence_dim,
        image_dim,
    })
}

fn load_interaction_data(
    interactions: &[Interaction],
    profiles: &EmbeddingStore,
    images: &EmbeddingStore,
) -> anyhow::Result<Vec<InteractionData>> {
    interactions
        .iter()
        .map(|it| {
            let profile = profiles.row_f64(&it.profile_id)?;
            let candidates: Vec<Vec<f64>> = it
                .pool
                .iter()
                .map(|id| images.row_f64(id))
                .collect::<showcase_core::Result<_>>()?;
            let gt: Vec<usize> = it
                .ground_truth
                .iter()
                .map(|id| {
                    it.pool.iter().position(|p| p == id).ok_or_else(|| {
                        showcase_core::Error::UnknownId {
                            id: id.clone(),
                            kind: "pool image".to_string(),
                        }
                    })
                })
                .collect::<showcase_core::Result<_>>()?;
            Ok(InteractionData::new(profile, candidates, gt)?)
        })
        .collect()
}

pub fn cmd_select_train(
    config: &PipelineConfig,
    out: &Path,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = ManifestBuilder::new("select-train", seed, config);
    let paths = &config.paths;
    let interactions_path = paths.input(out, &paths.interactions);
    let profiles_path = paths.input(out, &paths.profiles);
    let images_path = paths.input(out, &paths.images);
    for p in [&interactions_path, &profiles_path, &images_path] {
        manifest.input(p)?;
    }

    let interactions: Vec<Interaction> = read_jsonl(&interactions_path)?;
    let profiles = EmbeddingStore::load(&profiles_path)?;
    let images = EmbeddingStore::load(&images_path)?;
    let data = load_interaction_data(&interactions, &profiles, &images)?;

    let rc = RelevanceConfig {
        user_input: profiles.dim(),
        image_input: images.dim(),
        hidden: config.dpp.hidden.clone(),
    };
    let mut model = RelevanceModel::init(rc.clone(), config.dpp.seed)?;
    let train_config = DppTrainConfig {
        epochs: config.dpp.epochs,
        lr: config.dpp.lr,
        batch: config.dpp.batch,
        seed: config.dpp.seed,
    };
    let losses = dpp::train_relevance(&mut model, &data, &train_config)?;

    let relevance_path = paths.artifact(out, &paths.relevance);
    model
        .params
        .save(&relevance_path, serde_json::to_value(&rc)?)?;
    let report = serde_json::json!({
        "interactions": interactions.len(),
        "epochs": config.dpp.epochs,
        "first_nll": losses.first().copied(),
        "final_nll": losses.last().copied(),
    });
    let report_path = out.join("select_train_report.json");
    write_report(&report_path, &report)?;
    println!(
        "select-train: {} interactions, nll {:.3} -> {:.3}, checkpoint {}",
        interactions.len(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        relevance_path.display()
    );
    manifest.output(&relevance_path);
    manifest.output(&report_path);
    manifest.write(out)?;
    Ok(())
}

pub fn cmd_select(
    config: &PipelineConfig,
    out: &Path,
    seed: Option<u64>,
    random: bool,
    checkpoint: Option<&Path>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = ManifestBuilder::new("select", seed, config);
    let paths = &config.paths;
    let interactions_path = paths.input(out, &paths.interactions);
    let profiles_path = paths.input(out, &paths.profiles);
    let images_path = paths.input(out, &paths.images);
    for p in [&interactions_path, &profiles_path, &images_path] {
        manifest.input(p)?;
    }

    let interactions: Vec<Interaction> = read_jsonl(&interactions_path)?;
    let profiles = EmbeddingStore::load(&profiles_path)?;
    let images = EmbeddingStore::load(&images_path)?;

    let model = if random {
        None
    } else {
        let ckpt_path = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| paths.artifact(out, &paths.relevance));
        manifest.input(&ckpt_path)?;
        let (params, meta) = ParamMap::load(&ckpt_path)?;
        let rc: RelevanceConfig =
            serde_json::from_value(meta).map_err(|e| anyhow!("relevance checkpoint meta: {e}"))?;
        Some(RelevanceModel::from_params(rc, params)?)
    };

    let k = config.dpp.k;
    let mut rng = ChaCha12Rng::seed_from_u64(seed.unwrap_or(config.dpp.seed));
    let mut showcases = Vec::new();
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    let mut div_sum = 0.0;
    let mut div_count = 0usize;
    let mut skipped = 0usize;
    for it in &interactions {
        if it.pool.is_empty() {
            skipped += 1;
            continue;
        }
        let selected_ids: Vec<String> = match &model {
            Some(m) => {
                let profile = profiles.row_f64(&it.profile_id)?;
                let candidates: Vec<Vec<f64>> = it
                    .pool
                    .iter()
                    .map(|id| images.row_f64(id))
                    .collect::<showcase_core::Result<_>>()?;
                let kernel = dpp::build_kernel(&profile, &candidates, m)?;
                let selection = dpp::greedy_map(&kernel, k)?;
                selection
                    .indices
                    .iter()
                    .map(|&i| it.pool[i].clone())
                    .collect()
            }
            None => {
                let mut pool = it.pool.clone();
                pool.shuffle(&mut rng);
                pool.truncate(k);
                pool
            }
        };
        let m = dpp::rank_metrics(&selected_ids, &it.ground_truth)?;
        precision += m.precision;
        recall += m.recall;
        f1 += m.f1;
        if selected_ids.len() >= 2 {
            let embs: Vec<Vec<f64>> = selected_ids
                .iter()
                .map(|id| images.row_f64(id))
                .collect::<showcase_core::Result<_>>()?;
            div_sum += dpp::div_at_k(&embs)?;
            div_count += 1;
        }
        showcases.push(ShowcaseRecord {
            user_id: it.user_id.clone(),
            business_id: it.business_id.clone(),
            selected: selected_ids,
        });
    }
    let n = showcases.len().max(1) as f64;

    let showcases_path = paths.artifact(out, &paths.showcases);
    write_jsonl(&showcases_path, &showcases)?;
    let report = serde_json::json!({
        "mode": if random { "random" } else { "model" },
        "k": k,
        "showcases": showcases.len(),
        "skipped_empty_pools": skipped,
        "precision": pct(precision / n),
        "recall": pct(recall / n),
        "f1": pct(f1 / n),
        "div": if div_count > 0 { Some(pct(div_sum / div_count as f64)) } else { None },
    });
    let report_path = out.join("select_report.json");
    write_report(&report_path, &report)?;
    println!(
        "select ({}): P@{k} {:.2}% R@{k} {:.2}% F1@{k} {:.2}% div@{k} {:.2}%{}",
        if random { "random" } else { "model" },
        pct(precision / n),
        pct(recall / n),
        pct(f1 / n),
        if div_count > 0 {
            pct(div_sum / div_count as f64)
        } else {
            0.0
        },
        if skipped > 0 {
            format!(" ({skipped} empty pools skipped)")
        } else {
            String::new()
        }
    );
    manifest.output(&showcases_path);
    manifest.output(&report_path);
    manifest.write(out)?;
    Ok(())
}

struct TrainInputs {
    vocab: Vocabulary,
    entity_vocab: EntityVocab,
    samples: Vec<trainer::TrainSample>,
    image_dim: usize,
    review_dim: usize,
}

/// Entity vocabulary: the configured file when present, otherwise derived
/// from the dataset's entity spans (unique surface forms, sorted) and
/// written next to the other artifacts.
fn ensure_entity_vocab(
    path: &Path,
    records: &[ReviewRecord],
    out: &Path,
) -> anyhow::Result<EntityVocab> {
    if path.exists() {
        return Ok(EntityVocab::load(path)?);
    }
    let mut entities: Vec<String> = records
        .iter()
        .flat_map(|r| r.sentences.iter())
        .flat_map(|s| s.entities.iter())
        .map(|e| e.entity.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    entities.sort();
    let ev = EntityVocab { entities };
    let derived = out.join("entities.txt");
    ev.save(&derived)?;
    Ok(ev)
}

fn load_train_inputs(config: &PipelineConfig, out: &Path) -> anyhow::Result<TrainInputs> {
    let paths = &config.paths;
    let vocab = Vocabulary::load(&paths.input(out, &paths.vocab))?;
    let records: Vec<ReviewRecord> = read_jsonl(&paths.input(out, &paths.dataset))?;
    let entity_vocab = ensure_entity_vocab(&paths.input(out, &paths.entities), &records, out)?;
    let targets: Vec<TargetRecord> = read_jsonl(&paths.artifact(out, &paths.targets))?;
    let images = EmbeddingStore::load(&paths.input(out, &paths.images))?;
    let reviews = EmbeddingStore::load(&paths.input(out, &paths.reviews))?;
    let samples = trainer::assemble_samples(
        &targets,
        &records,
        &images,
        &reviews,
        &vocab,
        config.model.max_len,
        config.model.max_images,
        config.model.max_reviews,
    )?;
    Ok(TrainInputs {
        vocab,
        entity_vocab,
        samples,
        image_dim: images.dim(),
        review_dim: reviews.dim(),
    })
}

pub fn cmd_train(
    config: &PipelineConfig,
    out: &Path,
    seed: Option<u64>,
    mode: Option<&str>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = ManifestBuilder::new("train", seed, config);
    let paths = &config.paths;
    for p in [
        paths.input(out, &paths.vocab),
        paths.input(out, &paths.dataset),
        paths.artifact(out, &paths.targets),
        paths.input(out, &paths.images),
        paths.input(out, &paths.reviews),
    ] {
        manifest.input(&p)?;
    }
    let entities_path = paths.input(out, &paths.entities);
    if entities_path.exists() {
        manifest.input(&entities_path)?;
    }

    let inputs = load_train_inputs(config, out)?;
    let mode = LossMode::parse(mode.unwrap_or(&config.train.mode))?;
    let model_config = config.model_config(inputs.vocab.len(), inputs.image_dim, inputs.review_dim);
    let mut model = Model::init(model_config, config.train.seed)?;
    let mut heads = ContrastHeads::init(
        config.model.hidden,
        config.model.proj_dim,
        config.train.seed.wrapping_add(1),
    )?;
    let train_config = TrainConfig {
        lr: config.train.lr,
        weight_decay: config.train.weight_decay,
        batch: config.train.batch,
        epochs: config.train.epochs,
        seed: config.train.seed,
        mode,
    };
    let log = trainer::train_model(
        &mut model,
        &mut heads,
        &inputs.samples,
        &inputs.entity_vocab,
        &inputs.vocab,
        &train_config,
    )?;

    // One checkpoint holds the generator and the projection heads; their
    // name prefixes never collide.
    let mut merged = ParamMap::new();
    for (name, t) in model.params.iter() {
        merged.insert(name, t.clone())?;
    }
    for (name, t) in heads.params.iter() {
        merged.insert(name, t.clone())?;
    }
    let checkpoint_path = paths.artifact(out, &paths.checkpoint);
    merged.save(
        &checkpoint_path,
        serde_json::json!({
            "model": serde_json::to_value(&model.config)?,
            "mode": mode.as_str(),
        }),
    )?;

    let first = log.first().map(|b| b.total);
    let last = log.last().map(|b| b.total);
    let steps: Vec<serde_json::Value> = log
        .iter()
        .map(|b| {
            serde_json::json!({
                "ce": b.ce, "ccl": b.ccl, "pcl": b.pcl,
                "lambda1": b.lambda1, "lambda2": b.lambda2, "total": b.total,
            })
        })
        .collect();
    let report = serde_json::json!({
        "samples": inputs.samples.len(),
        "steps": log.len(),
        "mode": mode.as_str(),
        "first_loss": first,
        "final_loss": last,
        "log": steps,
    });
    let report_path = out.join("train_report.json");
    write_report(&report_path, &report)?;
    println!(
        "train [{}]: {} samples, {} steps, loss {:.3} -> {:.3}, checkpoint {}",
        mode.as_str(),
        inputs.samples.len(),
        log.len(),
        first.unwrap_or(f64::NAN),
        last.unwrap_or(f64::NAN),
        checkpoint_path.display()
    );
    manifest.output(&checkpoint_path);
    manifest.output(&report_path);
    manifest.write(out)?;
    Ok(())
}

fn load_model_checkpoint(path: &Path, vocab_len: usize) -> anyhow::Result<Model> {
    let (merged, meta) = ParamMap::load(path)?;
    let model_config: showcase_core::model::ModelConfig =
        serde_json::from_value(meta["model"].clone())
            .map_err(|e| anyhow!("checkpoint meta: {e}"))?;
    if model_config.vocab != vocab_len {
        bail!(
            "vocab/checkpoint mismatch: checkpoint was trained with {} tokens, vocabulary file has {}",
            model_config.vocab,
            vocab_len
        );
    }
    let mut params = ParamMap::new();
    for (name, t) in merged.iter() {
        if !name.starts_with("proj_") {
            params.insert(name, t.clone())?;
        }
    }
    Ok(Model::from_params(model_config, params)?)
}

pub fn cmd_generate(
    config: &PipelineConfig,
    out: &Path,
    seed: Option<u64>,
    checkpoint: Option<&Path>,
    showcases_file: Option<&Path>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = ManifestBuilder::new("generate", seed, config);
    let paths = &config.paths;
    let vocab_path = paths.input(out, &paths.vocab);
    let checkpoint_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| paths.artifact(out, &paths.checkpoint));
    let showcases_path = showcases_file
        .map(Path::to_path_buf)
        .unwrap_or_else(|| paths.artifact(out, &paths.showcases));
    let dataset_path = paths.input(out, &paths.dataset);
    let targets_path = paths.artifact(out, &paths.targets);
    let images_path = paths.input(out, &paths.images);
    let reviews_path = paths.input(out, &paths.reviews);
    for p in [
        &vocab_path,
        &checkpoint_path,
        &showcases_path,
        &dataset_path,
        &targets_path,
        &images_path,
        &reviews_path,
    ] {
        manifest.input(p)?;
    }

    let vocab = Vocabulary::load(&vocab_path)?;
    let model = load_model_checkpoint(&checkpoint_path, vocab.len())?;
    let showcases: Vec<ShowcaseRecord> = read_jsonl(&showcases_path)?;
    let records: Vec<ReviewRecord> = read_jsonl(&dataset_path)?;
    let targets: Vec<TargetRecord> = read_jsonl(&targets_path)?;
    let images = EmbeddingStore::load(&images_path)?;
    let reviews = EmbeddingStore::load(&reviews_path)?;

    // Generation targets the showcases whose (user, business) pair has a
    // reference explanation; history comes from the user's review record.
    let mut reference_by_pair: HashMap<(String, String), &TargetRecord> = HashMap::new();
    for t in &targets {
        reference_by_pair.insert((t.user_id.clone(), t.business_id.clone()), t);
    }
    let mut history_by_user: HashMap<&str, &Vec<String>> = HashMap::new();
    for r in &records {
        history_by_user
            .entry(r.user_id.as_str())
            .or_insert(&r.history);
    }

    let mut generations = Vec::new();
    let mut skipped = 0usize;
    for showcase in &showcases {
        let key = (showcase.user_id.clone(), showcase.business_id.clone());
        let Some(reference) = reference_by_pair.get(&key) else {
            skipped += 1;
            continue;
        };
        let history_ids = history_by_user
            .get(showcase.user_id.as_str())
            .ok_or_else(|| anyhow!("no review history for user {}", showcase.user_id))?;
        let image_embs: Vec<Vec<f64>> = showcase
            .selected
            .iter()
            .take(model.config.max_images)
            .map(|id| images.row_f64(id))
            .collect::<showcase_core::Result<_>>()?;
        let history_embs: Vec<Vec<f64>> = history_ids
            .iter()
            .take(model.config.max_reviews)
            .map(|id| reviews.row_f64(id))
            .collect::<showcase_core::Result<_>>()?;
        let tokens = model.generate(
            &image_embs,
            &history_embs,
            config.generate.beam,
            config.generate.max_len,
        )?;
        generations.push(GenerationRecord {
            user_id: showcase.user_id.clone(),
            business_id: showcase.business_id.clone(),
            review_id: reference.review_id.clone(),
            text: vocab.decode(&tokens),
        });
    }

    let generations_path = paths.artifact(out, &paths.generations);
    write_jsonl(&generations_path, &generations)?;
    println!(
        "generate: {} generations (beam {}, max {} tokens), {} unreferenced showcases skipped -> {}",
        generations.len(),
        config.generate.beam,
        config.generate.max_len,
        skipped,
        generations_path.display()
    );
    manifest.output(&generations_path);
    manifest.write(out)?;
    Ok(())
}

/// Split a token stream into sentences at '.' tokens; the period stays
/// with its sentence and empty tails are dropped.
pub fn split_sentences(tokens: &[String]) -> Vec<Vec<String>> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for tok in tokens {
        current.push(tok.clone());
        if tok == "." {
            sentences.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

pub fn cmd_evaluate(
    config: &PipelineConfig,
    out: &Path,
    seed: Option<u64>,
    generations_file: Option<&Path>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = ManifestBuilder::new("evaluate", seed, config);
    let paths = &config.paths;
    let generations_path = generations_file
        .map(Path::to_path_buf)
        .unwrap_or_else(|| paths.artifact(out, &paths.generations));
    let targets_path = paths.artifact(out, &paths.targets);
    let showcases_path = paths.artifact(out, &paths.showcases);
    let vocab_path = paths.input(out, &paths.vocab);
    let tokens_path = paths.input(out, &paths.tokens);
    let images_path = paths.input(out, &paths.images);
    let classifier_path = paths.artifact(out, &paths.classifier);
    let classes_path = paths.input(out, &paths.keyword_classes);
    for p in [
        &generations_path,
        &targets_path,
        &showcases_path,
        &vocab_path,
        &tokens_path,
        &images_path,
        &classifier_path,
        &classes_path,
    ] {
        manifest.input(p)?;
    }

    let generations: Vec<GenerationRecord> = read_jsonl(&generations_path)?;
    let targets: Vec<TargetRecord> = read_jsonl(&targets_path)?;
    let showcases: Vec<ShowcaseRecord> = read_jsonl(&showcases_path)?;
    let token_table = EmbeddingStore::load(&tokens_path)?;
    let images = EmbeddingStore::load(&images_path)?;
    let classifier = load_classifier(&classifier_path)?;
    let classes_raw: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&std::fs::read_to_string(&classes_path)?)?;
    let keyword_classes: BTreeMap<String, HashSet<String>> = classes_raw
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().collect()))
        .collect();

    if generations.is_empty() {
        bail!(showcase_core::Error::EmptyInput {
            what: "generations".to_string()
        });
    }
    let reference_by_review: HashMap<&str, &TargetRecord> =
        targets.iter().map(|t| (t.review_id.as_str(), t)).collect();
    let showcase_by_pair: HashMap<(String, String), &ShowcaseRecord> = showcases
        .iter()
        .map(|s| ((s.user_id.clone(), s.business_id.clone()), s))
        .collect();

    let mut candidates = Vec::with_capacity(generations.len());
    let mut references = Vec::with_capacity(generations.len());
    let mut lengths = Vec::with_capacity(generations.len());
    let mut empty_generations = 0usize;
    let mut align_sum = 0.0;
    let mut align_count = 0usize;
    let mut score_sum = 0.0;
    let mut score_count = 0usize;
    let mut coverage_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();

    for generation in &generations {
        let reference = reference_by_review
            .get(generation.review_id.as_str())
            .ok_or_else(|| anyhow!("missing reference for review {}", generation.review_id))?;
        let cand_tokens = showcase_core::vocab::tokenize(&generation.text);
        let ref_tokens = showcase_core::vocab::tokenize(&reference.text);
        // An empty hypothesis has no n-grams to score; it is counted and
        // excluded rather than failing the whole corpus.
        if cand_tokens.is_empty() {
            empty_generations += 1;
            lengths.push(0);
            continue;
        }
        lengths.push(cand_tokens.len());

        for (class, value) in metrics::keyword_coverage(&cand_tokens, &ref_tokens, &keyword_classes)
        {
            if let Some(v) = value {
                let entry = coverage_sums.entry(class).or_insert((0.0, 0));
                entry.0 += v;
                entry.1 += 1;
            }
        }

        // Alignment metrics need the showcase's image embeddings and the
        // generated sentences embedded through the token table.
        let key = (generation.user_id.clone(), generation.business_id.clone());
        if let Some(showcase) = showcase_by_pair.get(&key) {
            let image_embs: Vec<Vec<f64>> = showcase
                .selected
                .iter()
                .map(|id| images.row_f64(id))
                .collect::<showcase_core::Result<_>>()?;
            let sentence_embs: Vec<Vec<f64>> = split_sentences(&cand_tokens)
                .iter()
                .filter_map(|s| fixture::embed_tokens(s, &token_table))
                .collect();
            if !image_embs.is_empty() && !sentence_embs.is_empty() {
                align_sum += metrics::clip_align(&image_embs, &sentence_embs, &classifier)?;
                align_count += 1;
                score_sum += metrics::clip_score(&image_embs, &sentence_embs)?;
                score_count += 1;
            }
        }

        candidates.push(cand_tokens);
        references.push(ref_tokens);
    }

    if candidates.is_empty() {
        bail!(showcase_core::Error::EmptyInput {
            what: "generations (every hypothesis was empty)".to_string()
        });
    }
    let bleu1 = metrics::bleu_n(&candidates, &references, 1)?;
    let bleu4 = metrics::bleu_n(&candidates, &references, 4)?;
    let nist4 = metrics::nist_n(&candidates, &references, 4)?;
    let distinct1 = metrics::distinct_n(&candidates, 1)?;
    // Undefined when every surviving hypothesis is a single token.
    let distinct2 = metrics::distinct_n(&candidates, 2).ok();
    let histogram = metrics::length_histogram(&lengths)?;

    let coverage_pct: BTreeMap<String, Option<f64>> = keyword_classes
        .keys()
        .map(|class| {
            let value = coverage_sums
                .get(class)
                .filter(|(_, n)| *n > 0)
                .map(|(sum, n)| pct(sum / *n as f64));
            (class.clone(), value)
        })
        .collect();

    let report = serde_json::json!({
        "records": generations.len(),
        "empty_generations": empty_generations,
        "bleu1": pct(bleu1),
        "bleu4": pct(bleu4),
        "nist4": round2(nist4),
        "distinct1": pct(distinct1),
        "distinct2": distinct2.map(pct),
        "clip_align": if align_count > 0 { Some(pct(align_sum / align_count as f64)) } else { None },
        "clip_score": if score_count > 0 { Some(pct(score_sum / score_count as f64)) } else { None },
        "keyword_coverage": coverage_pct,
        "length_histogram": histogram,
    });
    let report_path = paths.artifact(out, &paths.metric_report);
    write_report(&report_path, &report)?;
    println!(
        "evaluate: {} records | BLEU-1 {:.2}% BLEU-4 {:.2}% NIST {:.2} | distinct-1 {:.2}% distinct-2 {} | align {} score {}",
        generations.len(),
        pct(bleu1),
        pct(bleu4),
        round2(nist4),
        pct(distinct1),
        report["distinct2"],
        report["clip_align"],
        report["clip_score"],
    );
    manifest.output(&report_path);
    manifest.write(out)?;
    Ok(())
}
