//! Contrastive pre-training on distantly labelled pairs, with label prompt
//! dropout, entity blanking and a masked-language-model term.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{blank_entities, Instance, PairSampler, RelationId};
use crate::encoder::{Adam, RelationRepresentation};
use crate::episodic::{apply_prompt_dropout, log_softmax_at};
use crate::error::{check_probability, LpdError, Result};
use crate::model::RelationModel;
use crate::rng::SeededRng;
use crate::tokenizer::{mask_for_mlm, EncodedInput, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Positive pairs per batch; the batch holds twice as many instances.
    pub batch_pairs: usize,
    pub alpha_pretrain: f64,
    pub rho_blank: f64,
    pub mask_prob: f64,
    /// Whether words of a kept prompt may be MLM targets.
    pub mask_prompt: bool,
    /// Divides the contrastive dot products.
    pub temperature: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_pairs: 32,
            alpha_pretrain: 0.6,
            rho_blank: 0.7,
            mask_prob: 0.15,
            mask_prompt: true,
            temperature: 1.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs < 2 {
            return Err(LpdError::invalid("batch_pairs must be at least 2"));
        }
        check_probability("alpha_pretrain", self.alpha_pretrain)?;
        check_probability("rho_blank", self.rho_blank)?;
        check_probability("mask_prob", self.mask_prob)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LpdError::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// `-log[exp(a.p) / (exp(a.p) + sum_i exp(a.n_i))]`.
pub fn contrastive_loss(
    anchor: &RelationRepresentation,
    positive: &RelationRepresentation,
    negatives: &[&RelationRepresentation],
) -> Result<f64> {
    Ok(contrastive_loss_grad(anchor, positive, negatives, 1.0)?.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// As [`contrastive_loss`] with dot products divided by `temperature`,
/// plus gradients.
pub fn contrastive_loss_grad(
    anchor: &RelationRepresentation,
    positive: &RelationRepresentation,
    negatives: &[&RelationRepresentation],
    temperature: f64,
) -> Result<ContrastiveGrad> {
    if negatives.is_empty() {
        return Err(LpdError::invalid("contrastive loss needs at least one negative"));
    }
    let dim = anchor.dim();
    let others = std::iter::once(positive).chain(negatives.iter().copied());
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    for r in others.clone() {
        if r.dim() != dim {
            return Err(LpdError::Shape(format!("representation dim {} != {dim}", r.dim())));
        }
        logits.push(anchor.dot(&r.values) / temperature);
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(LpdError::NonFinite("contrastive logits".into()));
    }
    let (logp, probs) = log_softmax_at(&logits, 0);
    let mut d_anchor = vec![0.0; dim];
    let mut d_others: Vec<Vec<f64>> = Vec::with_capacity(logits.len());
    for (j, r) in others.enumerate() {
        let coef = (probs[j] - if j == 0 { 1.0 } else { 0.0 }) / temperature;
        for (d, v) in d_anchor.iter_mut().zip(&r.values) {
            *d += coef * v;
        }
        d_others.push(anchor.values.iter().map(|a| coef * a).collect());
    }
    let d_positive = d_others.remove(0);
    Ok(ContrastiveGrad {
        loss: -logp,
        d_anchor,
        d_positive,
        d_negatives: d_others,
    })
}

/// Sum of cross-entropies over rows of `logits` (`targets.len() x vocab`)
/// and the matching logit gradient, both multiplied by `scale`.
pub fn mlm_loss_grad(logits: &[f32], vocab: usize, targets: &[TokenId], scale: f64) -> Result<(f64, Vec<f32>)> {
    if logits.len() != targets.len() * vocab {
        return Err(LpdError::Shape(format!(
            "{} logits for {} targets over vocab {vocab}",
            logits.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0f32; logits.len()];
    for (row, &t) in targets.iter().enumerate() {
        let t = t as usize;
        if t >= vocab {
            return Err(LpdError::invalid(format!("target id {t} outside vocab {vocab}")));
        }
        let slice: Vec<f64> = logits[row * vocab..(row + 1) * vocab].iter().map(|&v| v as f64).collect();
        if slice.iter().any(|v| !v.is_finite()) {
            return Err(LpdError::NonFinite("MLM logits".into()));
        }
        let (logp, probs) = log_softmax_at(&slice, t);
        total -= logp;
        for (j, p) in probs.iter().enumerate() {
            let y = if j == t { 1.0 } else { 0.0 };
            grad[row * vocab + j] = ((p - y) * scale) as f32;
        }
    }
    Ok((total * scale, grad))
}

/// Mean cross-entropy over masked positions; 0 when there are none.
pub fn mlm_loss(logits: &[f32], vocab: usize, targets: &[TokenId]) -> Result<f64> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    Ok(mlm_loss_grad(logits, vocab, targets, 1.0 / targets.len() as f64)?.0)
}

/// Encoded members of one batch. Members `2i` and `2i + 1` are a positive
/// pair; every other member with a different label is a negative.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch {
    pub inputs: Vec<EncodedInput>,
    pub labels: Vec<RelationId>,
    pub prompt_kept: Vec<bool>,
}

impl PretrainBatch {
    pub fn partner(i: usize) -> usize {
        i ^ 1
    }

    pub fn negatives(&self, i: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&j| j != i && j != Self::partner(i) && self.labels[j] != self.labels[i])
            .collect()
    }
}

/// Prompt dropout, blanking and masking for the given pairs of corpus
/// indices. `descriptions` is keyed by the distant label.
pub fn build_batch(
    model: &RelationModel,
    corpus: &[Instance],
    sampler: &PairSampler,
    descriptions: &BTreeMap<RelationId, String>,
    pairs: &[(usize, usize)],
    cfg: &PretrainConfig,
    rng: &mut SeededRng,
) -> Result<PretrainBatch> {
    let mut inputs = Vec::with_capacity(2 * pairs.len());
    let mut labels = Vec::with_capacity(2 * pairs.len());
    let mut prompt_kept = Vec::with_capacity(2 * pairs.len());
    for &(a, b) in pairs {
        for i in [a, b] {
            let label = sampler.label(i);
            let description = descriptions
                .get(&label)
                .ok_or_else(|| LpdError::invalid(format!("no description for {label}")))?;
            let prompt = apply_prompt_dropout(description, cfg.alpha_pretrain, rng)?;
            let blanked = blank_entities(&corpus[i], cfg.rho_blank, rng)?;
            let encoded = model.encode(&blanked, prompt)?;
            let masked = mask_for_mlm(&encoded, cfg.mask_prob, cfg.mask_prompt, model.vocab.len(), rng)?;
            inputs.push(masked);
            labels.push(label);
            prompt_kept.push(prompt.is_some());
        }
    }
    Ok(PretrainBatch {
        inputs,
        labels,
        prompt_kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogRecord {
    pub step: u64,
    pub l_cp: f64,
    pub l_mlm: f64,
    pub prompt_keep_rate: f64,
    /// Mean of `ln(negatives + 1)`: the contrastive loss of a model that
    /// cannot tell members apart.
    pub l_cp_uniform: f64,
}

/// One update on `L_CP + L_MLM`. Every member acts as an anchor once.
pub fn pretrain_step(
    model: &mut RelationModel,
    batch: PretrainBatch,
    temperature: f64,
    optimizer: &mut Adam,
    rng: &mut SeededRng,
) -> Result<PretrainLogRecord> {
    let n = batch.inputs.len();
    if n < 2 || n % 2 != 0 {
        return Err(LpdError::invalid("pretraining batch must hold whole pairs"));
    }
    let labels = batch.labels.clone();
    let kept = batch.prompt_kept.iter().filter(|k| **k).count();
    let negatives: Vec<Vec<usize>> = (0..n).map(|i| batch.negatives(i)).collect();
    let pass = model.forward_batch(batch.inputs, rng)?;

    let mut d_reps: Vec<Vec<f64>> = pass.reps.iter().map(|r| vec![0.0; r.dim()]).collect();
    let mut l_cp = 0.0;
    let mut uniform = 0.0;
    let mut anchors = 0usize;
    for i in 0..n {
        if negatives[i].is_empty() {
            continue;
        }
        anchors += 1;
        let negs: Vec<&RelationRepresentation> = negatives[i].iter().map(|&j| &pass.reps[j]).collect();
        let g = contrastive_loss_grad(&pass.reps[i], &pass.reps[PretrainBatch::partner(i)], &negs, temperature)?;
        l_cp += g.loss;
        uniform += ((negs.len() + 1) as f64).ln();
        add(&mut d_reps[i], &g.d_anchor);
        add(&mut d_reps[PretrainBatch::partner(i)], &g.d_positive);
        for (&j, d) in negatives[i].iter().zip(&g.d_negatives) {
            add(&mut d_reps[j], d);
        }
    }
    if anchors == 0 {
        return Err(LpdError::invalid("every batch member shares one relation; no negatives"));
    }
    let inv = 1.0 / anchors as f64;
    l_cp *= inv;
    for d in &mut d_reps {
        d.iter_mut().for_each(|v| *v *= inv);
    }

    let vocab = model.vocab.len();
    let total_targets: usize = pass.inputs.iter().map(|e| e.mlm_targets.len()).sum();
    let mut l_mlm = 0.0;
    let mut d_mlm = Vec::with_capacity(n);
    let scale = 1.0 / total_targets.max(1) as f64;
    for (input, fp) in pass.inputs.iter().zip(&pass.passes) {
        let positions: Vec<usize> = input.mlm_targets.iter().map(|&(p, _)| p).collect();
        let targets: Vec<TokenId> = input.mlm_targets.iter().map(|&(_, t)| t).collect();
        let logits = model.encoder.mlm_logits(fp.hidden(), &positions)?;
        let (loss, grad) = mlm_loss_grad(&logits, vocab, &targets, scale)?;
        l_mlm += loss;
        d_mlm.push(grad);
    }
    if !(l_cp.is_finite() && l_mlm.is_finite()) {
        return Err(LpdError::NonFinite("pretraining loss".into()));
    }

    let grads = model.backward_batch(&pass, &d_reps, Some(&d_mlm))?;
    let step = optimizer.step;
    optimizer.update(&mut model.encoder.params.data, &grads)?;
    model.seen_relations.extend(labels);
    Ok(PretrainLogRecord {
        step,
        l_cp,
        l_mlm,
        prompt_keep_rate: kept as f64 / n as f64,
        l_cp_uniform: uniform * inv,
    })
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Line-delimited JSON log writer.
pub struct PretrainLog<W: Write> {
    out: W,
}

impl<W: Write> PretrainLog<W> {
    pub fn new(out: W) -> Self {
        PretrainLog { out }
    }

    pub fn record(&mut self, rec: &PretrainLogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
