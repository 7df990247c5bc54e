use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{Instance, KnowledgeGraph, RelationId};

/// A distantly supervised positive pair plus in-batch negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub anchor: Instance,
    pub positive: Instance,
    pub negatives: Vec<Instance>,
}

/// Groups a corpus by the relation the knowledge graph assigns to each
/// instance's entity pair and draws batches of positive pairs.
#[derive(Debug, Clone)]
pub struct PairSampler {
    labels: Vec<RelationId>,
    groups: BTreeMap<RelationId, Vec<usize>>,
    eligible: Vec<RelationId>,
}

impl PairSampler {
    pub fn new(corpus: &[Instance], kg: &KnowledgeGraph) -> Self {
        let index = kg.pair_index();
        let labels: Vec<RelationId> = corpus
            .iter()
            .map(|inst| {
                index
                    .get(&(inst.head_text(), inst.tail_text()))
                    .copied()
                    .unwrap_or(inst.relation_id)
            })
            .collect();
        let mut groups: BTreeMap<RelationId, Vec<usize>> = BTreeMap::new();
        for (i, rel) in labels.iter().enumerate() {
            groups.entry(*rel).or_default().push(i);
        }
        let mut eligible = Vec::new();
        for (rel, members) in &groups {
            if members.len() < 2 {
                log::warn!("{rel} has a single instance; skipped for pair sampling");
            } else {
                eligible.push(*rel);
            }
        }
        PairSampler {
            labels,
            groups,
            eligible,
        }
    }

    pub fn label(&self, index: usize) -> RelationId {
        self.labels[index]
    }

    pub fn eligible_relations(&self) -> &[RelationId] {
        &self.eligible
    }

    /// `n_pairs` (anchor, positive) index pairs. Relations are visited in a
    /// fresh random order per batch, so a batch repeats a relation only when
    /// `n_pairs` exceeds the number of eligible relations.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n_pairs: usize, rng: &mut R) -> Vec<(usize, usize)> {
        if self.eligible.is_empty() {
            return Vec::new();
        }
        let mut order = self.eligible.clone();
        let mut out = Vec::with_capacity(n_pairs);
        while out.len() < n_pairs {
            order.shuffle(rng);
            for rel in order.iter().take(n_pairs - out.len()) {
                let members = &self.groups[rel];
                let picked: Vec<usize> = members.choose_multiple(rng, 2).copied().collect();
                out.push((picked[0], picked[1]));
            }
        }
        out
    }
}

/// Endless stream of pair samples. Each internal batch holds
/// `batch_negatives + 1` pairs; a sample's negatives are the positives of
/// the other pairs in its batch whose relation differs from the anchor's.
pub struct PairStream<'a, R: Rng> {
    corpus: &'a [Instance],
    sampler: PairSampler,
    batch_negatives: usize,
    rng: R,
    pending: std::vec::IntoIter<PairSample>,
}

pub fn sample_pairs<'a, R: Rng>(
    corpus: &'a [Instance],
    kg: &KnowledgeGraph,
    batch_negatives: usize,
    rng: R,
) -> PairStream<'a, R> {
    PairStream {
        corpus,
        sampler: PairSampler::new(corpus, kg),
        batch_negatives,
        rng,
        pending: Vec::new().into_iter(),
    }
}

impl<R: Rng> Iterator for PairStream<'_, R> {
    type Item = PairSample;

    fn next(&mut self) -> Option<PairSample> {
        if let Some(s) = self.pending.next() {
            return Some(s);
        }
        let batch = self.sampler.sample_batch(self.batch_negatives + 1, &mut self.rng);
        if batch.is_empty() {
            return None;
        }
        let samples: Vec<PairSample> = batch
            .iter()
            .enumerate()
            .map(|(i, &(a, p))| {
                let rel = self.sampler.label(a);
                let negatives = batch
                    .iter()
                    .enumerate()
                    .filter(|&(j, &(_, q))| j != i && self.sampler.label(q) != rel)
                    .map(|(_, &(_, q))| self.corpus[q].clone())
                    .collect();
                PairSample {
                    anchor: self.corpus[a].clone(),
                    positive: self.corpus[p].clone(),
                    negatives,
                }
            })
            .collect();
        self.pending = samples.into_iter();
        self.pending.next()
    }
}
