//! N-way K-shot episodes, label prompt dropout on the support side,
//! prototypes, the prototypical loss and the episodic training step.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, RelationId, RelationType};
use crate::encoder::{Adam, RelationRepresentation};
use crate::error::{check_probability, LpdError, Result};
use crate::model::RelationModel;
use crate::rng::SeededRng;
use crate::tokenizer::EncodedInput;

/// Labelled instances grouped by relation, each relation with its
/// natural-language description.
#[derive(Debug, Clone)]
pub struct FewShotDataset {
    instances: Vec<Instance>,
    descriptions: BTreeMap<RelationId, String>,
    by_relation: BTreeMap<RelationId, Vec<usize>>,
}

impl FewShotDataset {
    /// Every instance's relation must have a description in `relations`.
    /// Relations with no instances are ignored.
    pub fn new(instances: Vec<Instance>, relations: &[RelationType]) -> Result<Self> {
        let known: BTreeMap<RelationId, &RelationType> = relations.iter().map(|r| (r.id, r)).collect();
        let mut by_relation: BTreeMap<RelationId, Vec<usize>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            inst.validate()?;
            if !known.contains_key(&inst.relation_id) {
                return Err(LpdError::invalid(format!(
                    "instance {i} has relation {} with no description",
                    inst.relation_id
                )));
            }
            by_relation.entry(inst.relation_id).or_default().push(i);
        }
        let descriptions = by_relation
            .keys()
            .map(|id| (*id, known[id].description.clone()))
            .collect();
        Ok(FewShotDataset {
            instances,
            descriptions,
            by_relation,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn instance(&self, i: usize) -> &Instance {
        &self.instances[i]
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn relation_ids(&self) -> Vec<RelationId> {
        self.by_relation.keys().copied().collect()
    }

    pub fn members(&self, relation: RelationId) -> &[usize] {
        self.by_relation.get(&relation).map_or(&[], Vec::as_slice)
    }

    pub fn description(&self, relation: RelationId) -> &str {
        &self.descriptions[&relation]
    }

    pub fn descriptions(&self) -> &BTreeMap<RelationId, String> {
        &self.descriptions
    }

    /// Same instances, different descriptions (for the description-quality
    /// ablations). Every relation in the dataset must be covered.
    pub fn with_descriptions(&self, descriptions: BTreeMap<RelationId, String>) -> Result<Self> {
        if let Some(missing) = self.by_relation.keys().find(|id| !descriptions.contains_key(id)) {
            return Err(LpdError::invalid(format!("no description for {missing}")));
        }
        let descriptions = self
            .by_relation
            .keys()
            .map(|id| (*id, descriptions[id].clone()))
            .collect();
        Ok(FewShotDataset {
            instances: self.instances.clone(),
            descriptions,
            by_relation: self.by_relation.clone(),
        })
    }
}

/// One few-shot task. Instances are referenced by their index in the
/// dataset the episode was sampled from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub relation_ids: Vec<RelationId>,
    /// `support[n][k]`, all of relation `relation_ids[n]`.
    pub support: Vec<Vec<usize>>,
    /// `(instance index, gold class)`.
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.relation_ids.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }
}

pub fn sample_episode(
    dataset: &FewShotDataset,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    rng: &mut SeededRng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || q_query == 0 {
        return Err(LpdError::invalid("N, K and Q must all be positive"));
    }
    let needed = k_shot + q_query;
    if let Some((id, members)) = dataset.by_relation.iter().find(|(_, m)| m.len() < needed) {
        return Err(LpdError::InsufficientData {
            relation: *id,
            needed,
            available: members.len(),
        });
    }
    let relations = dataset.relation_ids();
    if relations.len() < n_way {
        return Err(LpdError::invalid(format!(
            "{n_way}-way episodes need {n_way} relations, dataset has {}",
            relations.len()
        )));
    }
    let chosen: Vec<RelationId> = relations.choose_multiple(rng, n_way).copied().collect();
    let mut support = Vec::with_capacity(n_way);
    let mut query = Vec::with_capacity(n_way * q_query);
    for (class, id) in chosen.iter().enumerate() {
        let picks: Vec<usize> = dataset.members(*id).choose_multiple(rng, needed).copied().collect();
        support.push(picks[..k_shot].to_vec());
        query.extend(picks[k_shot..].iter().map(|&i| (i, class)));
    }
    Ok(Episode {
        relation_ids: chosen,
        support,
        query,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub alpha_pretrain: f64,
    pub alpha_train: f64,
    pub alpha_test: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        DropoutPolicy {
            alpha_pretrain: 0.6,
            alpha_train: 0.4,
            alpha_test: 0.0,
        }
    }
}

impl DropoutPolicy {
    pub fn validate(&self) -> Result<()> {
        check_probability("alpha_pretrain", self.alpha_pretrain)?;
        check_probability("alpha_train", self.alpha_train)?;
        check_probability("alpha_test", self.alpha_test)
    }
}

/// `None` (prompt dropped) with probability `alpha`, else the description.
pub fn apply_prompt_dropout<'a, R: Rng + ?Sized>(
    description: &'a str,
    alpha: f64,
    rng: &mut R,
) -> Result<Option<&'a str>> {
    check_probability("alpha", alpha)?;
    // Always consume one draw so the stream does not depend on alpha.
    let u: f64 = rng.random();
    Ok(if u < alpha { None } else { Some(description) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub vectors: Vec<Vec<f64>>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Row-wise mean of the `N x K` support representations.
pub fn compute_prototypes(support_reps: &[Vec<RelationRepresentation>]) -> Result<PrototypeSet> {
    let dim = support_reps
        .first()
        .and_then(|row| row.first())
        .map(RelationRepresentation::dim)
        .ok_or_else(|| LpdError::invalid("empty support set"))?;
    let mut vectors = Vec::with_capacity(support_reps.len());
    for row in support_reps {
        if row.is_empty() {
            return Err(LpdError::invalid("class with no support instances"));
        }
        let mut sum = vec![0.0; dim];
        for rep in row {
            if rep.dim() != dim {
                return Err(LpdError::Shape(format!("representation dim {} != {dim}", rep.dim())));
            }
            for (s, v) in sum.iter_mut().zip(&rep.values) {
                *s += v;
            }
        }
        let k = row.len() as f64;
        vectors.push(sum.into_iter().map(|s| s / k).collect());
    }
    Ok(PrototypeSet { vectors })
}

fn logits(prototypes: &PrototypeSet, query: &RelationRepresentation, temperature: f64) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(LpdError::invalid("no prototypes"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(LpdError::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let mut out = Vec::with_capacity(prototypes.len());
    for u in &prototypes.vectors {
        if u.len() != query.dim() {
            return Err(LpdError::Shape(format!("prototype dim {} != query dim {}", u.len(), query.dim())));
        }
        out.push(query.dot(u) / temperature);
    }
    if out.iter().any(|l| !l.is_finite()) {
        return Err(LpdError::NonFinite("episode logits".into()));
    }
    Ok(out)
}

/// Numerically stable `(log_softmax[gold], softmax)`.
pub(crate) fn log_softmax_at(logits: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / z).collect();
    (logits[gold] - max - z.ln(), probs)
}

/// Loss value and its gradients with respect to the query representation
/// and each prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLossGrad {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub d_query: Vec<f64>,
    pub d_prototypes: Vec<Vec<f64>>,
}

/// Cross-entropy of the gold class under a softmax over `r_q . u_n`.
pub fn episode_loss(prototypes: &PrototypeSet, query_rep: &RelationRepresentation, gold: usize) -> Result<f64> {
    Ok(episode_loss_grad(prototypes, query_rep, gold, 1.0)?.loss)
}

/// As [`episode_loss`] with logits divided by `temperature`, plus gradients.
pub fn episode_loss_grad(
    prototypes: &PrototypeSet,
    query_rep: &RelationRepresentation,
    gold: usize,
    temperature: f64,
) -> Result<EpisodeLossGrad> {
    if gold >= prototypes.len() {
        return Err(LpdError::invalid(format!("gold class {gold} out of {}", prototypes.len())));
    }
    let l = logits(prototypes, query_rep, temperature)?;
    let (logp, probs) = log_softmax_at(&l, gold);
    let dim = query_rep.dim();
    let mut d_query = vec![0.0; dim];
    let mut d_prototypes = Vec::with_capacity(prototypes.len());
    for (n, u) in prototypes.vectors.iter().enumerate() {
        let coef = (probs[n] - if n == gold { 1.0 } else { 0.0 }) / temperature;
        for (d, v) in d_query.iter_mut().zip(u) {
            *d += coef * v;
        }
        d_prototypes.push(query_rep.values.iter().map(|q| coef * q).collect());
    }
    Ok(EpisodeLossGrad {
        loss: -logp,
        probs,
        d_query,
        d_prototypes,
    })
}

/// Arg-max dot product; ties go to the lowest class index.
pub fn predict(query_rep: &RelationRepresentation, prototypes: &PrototypeSet) -> Result<usize> {
    let scores = logits(prototypes, query_rep, 1.0)?;
    let mut best = 0;
    for (n, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = n;
        }
    }
    Ok(best)
}

/// Token sequences for one episode after prompt dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedEpisode {
    pub support: Vec<Vec<EncodedInput>>,
    pub query: Vec<EncodedInput>,
    pub prompt_kept: Vec<Vec<bool>>,
}

/// Support instances get their relation's description unless dropped with
/// probability `alpha`; queries never get a prompt.
pub fn encode_episode(
    model: &RelationModel,
    dataset: &FewShotDataset,
    episode: &Episode,
    alpha: f64,
    rng: &mut SeededRng,
) -> Result<EncodedEpisode> {
    let mut support = Vec::with_capacity(episode.n_way());
    let mut prompt_kept = Vec::with_capacity(episode.n_way());
    for (id, row) in episode.relation_ids.iter().zip(&episode.support) {
        let description = dataset.description(*id);
        let mut enc_row = Vec::with_capacity(row.len());
        let mut kept_row = Vec::with_capacity(row.len());
        for &i in row {
            let prompt = apply_prompt_dropout(description, alpha, rng)?;
            kept_row.push(prompt.is_some());
            enc_row.push(model.encode(dataset.instance(i), prompt)?);
        }
        support.push(enc_row);
        prompt_kept.push(kept_row);
    }
    let query = episode
        .query
        .iter()
        .map(|&(i, _)| model.encode(dataset.instance(i), None))
        .collect::<Result<_>>()?;
    Ok(EncodedEpisode {
        support,
        query,
        prompt_kept,
    })
}

/// Debug record for one training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub step: u64,
    pub relation_ids: Vec<RelationId>,
    pub support: Vec<Vec<usize>>,
    pub prompt_kept: Vec<Vec<bool>>,
    pub query: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStepOutput {
    /// Mean cross-entropy over every query in the step.
    pub loss: f64,
    pub grad_norm: f64,
    pub records: Vec<EpisodeRecord>,
}

/// One optimizer update from a batch of episodes.
pub fn train_step(
    model: &mut RelationModel,
    dataset: &FewShotDataset,
    episodes: &[Episode],
    alpha_train: f64,
    temperature: f64,
    optimizer: &mut Adam,
    rng: &mut SeededRng,
) -> Result<TrainStepOutput> {
    if episodes.is_empty() {
        return Err(LpdError::invalid("train_step needs at least one episode"));
    }
    let mut inputs = Vec::new();
    let mut records = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let enc = encode_episode(model, dataset, ep, alpha_train, rng)?;
        inputs.extend(enc.support.into_iter().flatten());
        inputs.extend(enc.query);
        records.push(EpisodeRecord {
            step: optimizer.step,
            relation_ids: ep.relation_ids.clone(),
            support: ep.support.clone(),
            prompt_kept: enc.prompt_kept,
            query: ep.query.clone(),
        });
    }
    let batch = model.forward_batch(inputs, rng)?;
    let total_queries: usize = episodes.iter().map(|e| e.query.len()).sum();
    let scale = 1.0 / total_queries as f64;
    let mut d_reps: Vec<Vec<f64>> = batch.reps.iter().map(|r| vec![0.0; r.dim()]).collect();
    let mut loss = 0.0;
    let mut offset = 0;
    for ep in episodes {
        let (n, k) = (ep.n_way(), ep.k_shot());
        let support_reps: Vec<Vec<RelationRepresentation>> = (0..n)
            .map(|c| batch.reps[offset + c * k..offset + (c + 1) * k].to_vec())
            .collect();
        let protos = compute_prototypes(&support_reps)?;
        let q_off = offset + n * k;
        for (j, &(_, gold)) in ep.query.iter().enumerate() {
            let g = episode_loss_grad(&protos, &batch.reps[q_off + j], gold, temperature)?;
            loss += g.loss * scale;
            for (d, v) in d_reps[q_off + j].iter_mut().zip(&g.d_query) {
                *d += v * scale;
            }
            for (c, dp) in g.d_prototypes.iter().enumerate() {
                for s in 0..k {
                    for (d, v) in d_reps[offset + c * k + s].iter_mut().zip(dp) {
                        *d += v * scale / k as f64;
                    }
                }
            }
        }
        offset = q_off + ep.query.len();
    }
    if !loss.is_finite() {
        return Err(LpdError::NonFinite("episode loss".into()));
    }
    let grads = model.backward_batch(&batch, &d_reps, None)?;
    let grad_norm = optimizer.update(&mut model.encoder.params.data, &grads)?;
    for ep in episodes {
        model.seen_relations.extend(ep.relation_ids.iter().copied());
    }
    Ok(TrainStepOutput {
        loss,
        grad_norm,
        records,
    })
}

/// Mean loss over a batch of episodes in evaluation mode (no update).
pub fn batch_loss(
    model: &RelationModel,
    dataset: &FewShotDataset,
    episodes: &[Episode],
    alpha: f64,
    temperature: f64,
    rng: &mut SeededRng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ep in episodes {
        let enc = encode_episode(model, dataset, ep, alpha, rng)?;
        let support_reps = enc
            .support
            .iter()
            .map(|row| row.iter().map(|e| model.represent_encoded(e)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let protos = compute_prototypes(&support_reps)?;
        for (e, &(_, gold)) in enc.query.iter().zip(&ep.query) {
            let q = model.represent_encoded(e)?;
            total += episode_loss_grad(&protos, &q, gold, temperature)?.loss;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}
