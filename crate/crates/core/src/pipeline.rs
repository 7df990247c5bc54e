//! End-to-end building blocks: the synthetic benchmark, model
//! initialisation and the resumable pre-training and training loops.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    filter_leakage, generate_corpus_for, generate_kg_with, Instance, KgParams, KnowledgeGraph, PairSampler, RelationId, TextParams,
};
use crate::encoder::{Adam, AdamConfig, Encoder, EncoderConfig};
use crate::episodic::{sample_episode, train_step, FewShotDataset, TrainStepOutput};
use crate::error::{LpdError, Result};
use crate::model::RelationModel;
use crate::pretrain::{build_batch, pretrain_step, PretrainConfig, PretrainLogRecord};
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::tokenizer::{build_vocab, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub kg: KgParams,
    pub train_relations: usize,
    pub eval_relations: usize,
    pub train_per_relation: usize,
    pub eval_per_relation: usize,
    pub pretrain_per_relation: usize,
    pub text: TextParams,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 1,
            kg: KgParams::default(),
            train_relations: 20,
            eval_relations: 8,
            train_per_relation: 40,
            eval_per_relation: 40,
            pretrain_per_relation: 24,
            text: TextParams::default(),
        }
    }
}

/// Knowledge graph, disjoint train/eval relation sets, the leakage-filtered
/// pre-training corpus and a vocabulary covering all of them.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub kg: KnowledgeGraph,
    pub train_relations: Vec<RelationId>,
    pub eval_relations: Vec<RelationId>,
    pub train: FewShotDataset,
    pub eval: FewShotDataset,
    /// Pre-training corpus before the leakage filter.
    pub pretrain_raw: Vec<Instance>,
    /// `pretrain_raw` without any benchmark relation.
    pub pretrain_corpus: Vec<Instance>,
    pub vocab: Vocab,
}

impl Benchmark {
    pub fn benchmark_relations(&self) -> BTreeSet<RelationId> {
        self.train_relations.iter().chain(&self.eval_relations).copied().collect()
    }

    pub fn descriptions(&self) -> BTreeMap<RelationId, String> {
        self.kg.relations.iter().map(|r| (r.id, r.description.clone())).collect()
    }
}

pub fn build_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    if cfg.train_relations + cfg.eval_relations > cfg.kg.n_relations {
        return Err(LpdError::invalid(format!(
            "{} train + {} eval relations exceed the {} in the graph",
            cfg.train_relations, cfg.eval_relations, cfg.kg.n_relations
        )));
    }
    let kg = generate_kg_with(derive_seed(cfg.seed, "kg"), &cfg.kg)?;
    let mut ids: Vec<RelationId> = kg.relations.iter().map(|r| r.id).collect();
    ids.shuffle(&mut seeded(derive_seed(cfg.seed, "split")));
    let mut train_relations = ids[..cfg.train_relations].to_vec();
    let mut eval_relations = ids[cfg.train_relations..cfg.train_relations + cfg.eval_relations].to_vec();
    train_relations.sort();
    eval_relations.sort();

    let train_instances = generate_corpus_for(
        &kg,
        &train_relations,
        cfg.train_per_relation,
        derive_seed(cfg.seed, "train-text"),
        &cfg.text,
    )?;
    let eval_instances = generate_corpus_for(
        &kg,
        &eval_relations,
        cfg.eval_per_relation,
        derive_seed(cfg.seed, "eval-text"),
        &cfg.text,
    )?;
    let all: Vec<RelationId> = kg.relations.iter().map(|r| r.id).collect();
    let raw_pretrain = generate_corpus_for(
        &kg,
        &all,
        cfg.pretrain_per_relation,
        derive_seed(cfg.seed, "pretrain-text"),
        &cfg.text,
    )?;
    let benchmark: BTreeSet<RelationId> = train_relations.iter().chain(&eval_relations).copied().collect();
    let pretrain_corpus = filter_leakage(&raw_pretrain, &benchmark);

    let every: Vec<Instance> = train_instances
        .iter()
        .chain(&eval_instances)
        .chain(&raw_pretrain)
        .cloned()
        .collect();
    let vocab = build_vocab(&every, &kg.relations)?;
    Ok(Benchmark {
        train: FewShotDataset::new(train_instances, &kg.relations)?,
        eval: FewShotDataset::new(eval_instances, &kg.relations)?,
        kg,
        train_relations,
        eval_relations,
        pretrain_raw: raw_pretrain,
        pretrain_corpus,
        vocab,
    })
}

/// Fresh model whose embedding table matches `vocab`.
pub fn init_model(vocab: &Vocab, encoder: &EncoderConfig, seed: u64) -> Result<RelationModel> {
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        ..encoder.clone()
    };
    RelationModel::new(Encoder::new(cfg, seed)?, vocab.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub episodes_per_step: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub alpha_train: f64,
    pub temperature: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10_000,
            episodes_per_step: 4,
            n_way: 5,
            k_shot: 1,
            q_query: 1,
            alpha_train: 0.4,
            temperature: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub step: u64,
    pub adam: Adam,
    pub rng: SeededRng,
}

impl LoopState {
    pub fn new(adam: AdamConfig, n_params: usize, seed: u64) -> Self {
        LoopState {
            step: 0,
            adam: Adam::new(adam, n_params),
            rng: seeded(seed),
        }
    }
}

/// Episodic training up to `cfg.steps` total steps, starting from
/// `state.step`. `on_step` sees every step's output.
pub fn train_episodic<F>(
    model: &mut RelationModel,
    dataset: &FewShotDataset,
    cfg: &TrainConfig,
    state: &mut LoopState,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(u64, &TrainStepOutput) -> Result<()>,
{
    if cfg.episodes_per_step == 0 {
        return Err(LpdError::invalid("episodes_per_step must be positive"));
    }
    while state.step < cfg.steps {
        let episodes = (0..cfg.episodes_per_step)
            .map(|_| sample_episode(dataset, cfg.n_way, cfg.k_shot, cfg.q_query, &mut state.rng))
            .collect::<Result<Vec<_>>>()?;
        let out = train_step(
            model,
            dataset,
            &episodes,
            cfg.alpha_train,
            cfg.temperature,
            &mut state.adam,
            &mut state.rng,
        )?;
        on_step(state.step, &out)?;
        state.step += 1;
    }
    Ok(())
}

pub fn new_training_state(model: &RelationModel, cfg: &TrainConfig) -> LoopState {
    LoopState::new(cfg.adam, model.encoder.num_parameters(), derive_seed(cfg.seed, "train-loop"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainRunConfig {
    pub steps: u64,
    pub batch: PretrainConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainRunConfig {
    fn default() -> Self {
        PretrainRunConfig {
            steps: 300,
            batch: PretrainConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

pub fn new_pretraining_state(model: &RelationModel, cfg: &PretrainRunConfig) -> LoopState {
    LoopState::new(cfg.adam, model.encoder.num_parameters(), derive_seed(cfg.seed, "pretrain-loop"))
}

/// Contrastive pre-training on `corpus`, labelled through `kg`.
pub fn pretrain<F>(
    model: &mut RelationModel,
    corpus: &[Instance],
    kg: &KnowledgeGraph,
    cfg: &PretrainRunConfig,
    state: &mut LoopState,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&PretrainLogRecord) -> Result<()>,
{
    cfg.batch.validate()?;
    let sampler = PairSampler::new(corpus, kg);
    if sampler.eligible_relations().len() < 2 {
        return Err(LpdError::invalid(
            "pre-training needs at least two relations with two or more instances",
        ));
    }
    let descriptions: BTreeMap<RelationId, String> =
        kg.relations.iter().map(|r| (r.id, r.description.clone())).collect();
    while state.step < cfg.steps {
        let pairs = sampler.sample_batch(cfg.batch.batch_pairs, &mut state.rng);
        let batch = build_batch(model, corpus, &sampler, &descriptions, &pairs, &cfg.batch, &mut state.rng)?;
        let rec = pretrain_step(model, batch, cfg.batch.temperature, &mut state.adam, &mut state.rng)?;
        on_step(&rec)?;
        state.step += 1;
    }
    Ok(())
}
