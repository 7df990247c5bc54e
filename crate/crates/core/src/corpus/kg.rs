use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generate::{DESCRIPTION_FILLER, DESCRIPTION_OPENERS, FEATURE_WORDS, NAME_SYLLABLES};
use super::{RelationId, RelationType};
use crate::error::{LpdError, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    /// Whitespace-separated surface form.
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KgParams {
    pub n_entities: usize,
    pub n_relations: usize,
    /// Upper bound; lowered when the entity pool cannot supply enough pairs.
    pub triples_per_relation: usize,
    /// Cue words that characterize a relation in text.
    pub cue_words: usize,
    /// How many of the relation's own cue words its description names.
    pub description_cues: usize,
    /// Extra cue words from other relations mixed into each description.
    pub description_noise: usize,
}

impl Default for KgParams {
    fn default() -> Self {
        KgParams {
            n_entities: 600,
            n_relations: 100,
            triples_per_relation: 24,
            cue_words: 3,
            description_cues: 2,
            description_noise: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub entities: Vec<Entity>,
    pub relations: Vec<RelationType>,
    pub triples: Vec<Triple>,
    /// Cue words per relation (indexed by relation id), used by the sentence
    /// generator to express a relation in text.
    pub cues: Vec<Vec<String>>,
}

pub fn generate_kg(seed: u64, n_entities: usize, n_relations: usize) -> Result<KnowledgeGraph> {
    generate_kg_with(
        seed,
        &KgParams {
            n_entities,
            n_relations,
            ..KgParams::default()
        },
    )
}

pub fn generate_kg_with(seed: u64, params: &KgParams) -> Result<KnowledgeGraph> {
    let KgParams {
        n_entities,
        n_relations,
        triples_per_relation,
        cue_words,
        description_cues,
        description_noise,
    } = *params;
    if n_relations < 2 {
        return Err(LpdError::invalid(format!("need at least 2 relations, got {n_relations}")));
    }
    if n_entities < 2 * n_relations {
        return Err(LpdError::invalid(format!(
            "{n_entities} entities cannot give {n_relations} relations two distinct pairs each \
             (need at least {})",
            2 * n_relations
        )));
    }
    if cue_words < 2 || cue_words + description_noise > FEATURE_WORDS.len() {
        return Err(LpdError::invalid(format!("unsupported cue_words={cue_words}")));
    }
    if description_cues == 0 || description_cues > cue_words {
        return Err(LpdError::invalid(format!(
            "description_cues must be in 1..={cue_words}, got {description_cues}"
        )));
    }
    let mut rng = seeded(seed);

    let entities = entity_names(n_entities, &mut rng)?
        .into_iter()
        .enumerate()
        .map(|(i, name)| Entity {
            id: EntityId(i as u32),
            name,
        })
        .collect::<Vec<_>>();

    let cues = cue_sets(n_relations, cue_words, &mut rng)?;
    let relations = cues
        .iter()
        .enumerate()
        .map(|(i, cue)| RelationType {
            id: RelationId(i as u32),
            name: cue.join("_"),
            description: format!(
                "{} {}",
                cue.join("_"),
                describe(cue, description_cues, description_noise, &mut rng)
            ),
        })
        .collect::<Vec<_>>();

    // Entity pairs are unique across the whole graph so a pair determines
    // its relation, which keeps distant supervision unambiguous.
    let max_pairs = n_entities * (n_entities - 1);
    let per_relation = triples_per_relation.min(max_pairs / n_relations).max(2);
    let mut used = BTreeSet::new();
    let mut triples = Vec::with_capacity(per_relation * n_relations);
    for rel in &relations {
        let mut count = 0;
        while count < per_relation {
            let h = rng.random_range(0..n_entities as u32);
            let t = rng.random_range(0..n_entities as u32);
            if h == t || !used.insert((h, t)) {
                continue;
            }
            triples.push(Triple {
                head: EntityId(h),
                relation: rel.id,
                tail: EntityId(t),
            });
            count += 1;
        }
    }
    triples.sort();
    let kg = KnowledgeGraph {
        entities,
        relations,
        triples,
        cues,
    };
    kg.validate()?;
    Ok(kg)
}

fn entity_names(n: usize, rng: &mut impl Rng) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut names = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while names.len() < n {
        attempts += 1;
        if attempts > 100 * n + 10_000 {
            return Err(LpdError::invalid(format!("cannot create {n} distinct entity names")));
        }
        let len = rng.random_range(1..=3);
        let name = (0..len)
            .map(|_| *NAME_SYLLABLES.choose(rng).expect("syllables"))
            .collect::<Vec<_>>()
            .join(" ");
        if seen.insert(name.clone()) {
            names.push(name);
        }
    }
    Ok(names)
}

/// Distinct cue sets where any two relations share at most one word, so no
/// single word identifies a relation and no pair of words is ambiguous.
fn cue_sets(n_relations: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<String>>> {
    let mut used_pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut sets = Vec::with_capacity(n_relations);
    let mut attempts = 0usize;
    let mut pool: Vec<usize> = (0..FEATURE_WORDS.len()).collect();
    while sets.len() < n_relations {
        attempts += 1;
        if attempts > 200_000 {
            return Err(LpdError::invalid(format!(
                "cannot build {n_relations} relations with {size} cue words each from {} words",
                FEATURE_WORDS.len()
            )));
        }
        pool.shuffle(rng);
        let mut chosen: Vec<usize> = pool[..size].to_vec();
        chosen.sort_unstable();
        let pairs: Vec<(usize, usize)> = chosen
            .iter()
            .enumerate()
            .flat_map(|(i, &a)| chosen[i + 1..].iter().map(move |&b| (a, b)))
            .collect();
        if pairs.iter().any(|p| used_pairs.contains(p)) {
            continue;
        }
        used_pairs.extend(pairs);
        chosen.shuffle(rng);
        sets.push(chosen.into_iter().map(|i| FEATURE_WORDS[i].to_string()).collect());
    }
    Ok(sets)
}

/// Relation name, then an opener and a shuffled mix of some of the
/// relation's cue words, a few foreign cue words and filler.
fn describe(cues: &[String], named: usize, noise: usize, rng: &mut impl Rng) -> String {
    let mut content: Vec<&str> = cues.choose_multiple(rng, named).map(String::as_str).collect();
    let others: Vec<&str> = FEATURE_WORDS
        .iter()
        .copied()
        .filter(|w| !cues.iter().any(|c| c == w))
        .collect();
    content.extend(others.choose_multiple(rng, noise).copied());
    content.shuffle(rng);
    let mut words = vec![*DESCRIPTION_OPENERS.choose(rng).expect("openers")];
    for w in content {
        if rng.random_bool(0.6) {
            words.push(DESCRIPTION_FILLER.choose(rng).expect("filler"));
        }
        words.push(w);
    }
    words.join(" ")
}

impl KnowledgeGraph {
    pub fn validate(&self) -> Result<()> {
        for (i, rel) in self.relations.iter().enumerate() {
            if rel.id.0 as usize != i {
                return Err(LpdError::format("knowledge graph", "relation ids must be contiguous from 0"));
            }
            if rel.description.trim().is_empty() {
                return Err(LpdError::format("knowledge graph", format!("{} has empty description", rel.id)));
            }
        }
        for (i, ent) in self.entities.iter().enumerate() {
            if ent.id.0 as usize != i {
                return Err(LpdError::format("knowledge graph", "entity ids must be contiguous from 0"));
            }
        }
        let mut seen = BTreeSet::new();
        for t in &self.triples {
            if t.relation.0 as usize >= self.relations.len()
                || t.head.0 as usize >= self.entities.len()
                || t.tail.0 as usize >= self.entities.len()
            {
                return Err(LpdError::format("knowledge graph", format!("dangling triple {t:?}")));
            }
            if !seen.insert(*t) {
                return Err(LpdError::format("knowledge graph", format!("duplicate triple {t:?}")));
            }
        }
        if self.cues.len() != self.relations.len() {
            return Err(LpdError::format("knowledge graph", "one cue set per relation required"));
        }
        Ok(())
    }

    pub fn relation(&self, id: RelationId) -> Option<&RelationType> {
        self.relations.get(id.0 as usize)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id.0 as usize].name
    }

    pub fn triples_by_relation(&self) -> BTreeMap<RelationId, Vec<Triple>> {
        let mut out: BTreeMap<RelationId, Vec<Triple>> = BTreeMap::new();
        for t in &self.triples {
            out.entry(t.relation).or_default().push(*t);
        }
        out
    }

    /// Index from (head surface, tail surface) to the relation the graph
    /// asserts between them.
    pub fn pair_index(&self) -> HashMap<(String, String), RelationId> {
        self.triples
            .iter()
            .map(|t| {
                (
                    (self.entity_name(t.head).to_string(), self.entity_name(t.tail).to_string()),
                    t.relation,
                )
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kg: KnowledgeGraph = serde_json::from_slice(&std::fs::read(path)?)?;
        kg.validate()?;
        Ok(kg)
    }
}
