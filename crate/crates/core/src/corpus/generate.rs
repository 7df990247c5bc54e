use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Instance, KnowledgeGraph, RelationId, Span, DEFAULT_DOMAIN};
use crate::error::{LpdError, Result};
use crate::rng::seeded;

/// Content words that carry relational meaning. Every relation is a small
/// combination of these, and sentences use them as (noisy) cues.
pub(crate) const FEATURE_WORDS: &[&str] = &[
    "born", "founded", "capital", "member", "married", "located", "directed", "composed",
    "studied", "played", "owned", "designed", "ruled", "parent", "river", "league", "album",
    "award", "language", "religion", "party", "employer", "genre", "island", "mountain",
    "record", "station", "church", "army", "school", "bridge", "county", "painting", "novel",
    "film", "team", "ship", "company", "museum", "festival", "war", "airport", "province",
    "journal", "opera", "dynasty", "tribe", "canal",
];

/// Function words shared by every relation's sentences.
pub(crate) const CONNECTIVES: &[&str] = &[
    "the", "a", "of", "in", "was", "is", "and", "by", "with", "to", "for", "which", "that",
    "later", "also", "its", "from", "at", "on", "as",
];

pub(crate) const DESCRIPTION_OPENERS: &[&str] = &["relation", "property", "link", "statement"];

pub(crate) const DESCRIPTION_FILLER: &[&str] = &[
    "where", "subject", "object", "whose", "item", "between", "describing", "regarding",
    "indicates", "entity",
];

pub(crate) const NAME_SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tor", "vel", "san", "dor", "eli", "bru", "quin", "ast", "fen",
    "gal", "hux", "ira", "jov", "kel", "mur", "nox", "oth", "pel", "rud", "sil",
];

/// Knobs of the sentence templates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextParams {
    /// Range of the relation's cue words shown in one sentence.
    pub cues_min: usize,
    pub cues_max: usize,
    /// Range of misleading cue words drawn from other relations.
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub connectives_min: usize,
    pub connectives_max: usize,
    pub head_first_prob: f64,
}

impl Default for TextParams {
    fn default() -> Self {
        TextParams {
            cues_min: 1,
            cues_max: 2,
            distractors_min: 0,
            distractors_max: 1,
            connectives_min: 2,
            connectives_max: 5,
            head_first_prob: 0.7,
        }
    }
}

impl TextParams {
    fn validate(&self) -> Result<()> {
        if self.cues_min == 0 || self.cues_min > self.cues_max {
            return Err(LpdError::invalid("need 1 <= cues_min <= cues_max"));
        }
        if self.distractors_min > self.distractors_max || self.connectives_min > self.connectives_max {
            return Err(LpdError::invalid("text parameter ranges must be ordered"));
        }
        crate::error::check_probability("head_first_prob", self.head_first_prob)
    }
}

/// `per_relation` sentences for every relation of `kg`, in relation order.
pub fn generate_corpus(kg: &KnowledgeGraph, per_relation: usize, seed: u64) -> Result<Vec<Instance>> {
    let all: Vec<RelationId> = kg.relations.iter().map(|r| r.id).collect();
    generate_corpus_for(kg, &all, per_relation, seed, &TextParams::default())
}

pub fn generate_corpus_for(
    kg: &KnowledgeGraph,
    relations: &[RelationId],
    per_relation: usize,
    seed: u64,
    params: &TextParams,
) -> Result<Vec<Instance>> {
    if per_relation == 0 {
        return Err(LpdError::invalid("per_relation must be at least 1"));
    }
    params.validate()?;
    let mut rng = seeded(seed);
    let by_relation = kg.triples_by_relation();
    let mut out = Vec::with_capacity(per_relation * relations.len());
    for &rel in relations {
        let cues = kg
            .cues
            .get(rel.0 as usize)
            .ok_or_else(|| LpdError::invalid(format!("{rel} not in knowledge graph")))?;
        let mut triples = by_relation
            .get(&rel)
            .cloned()
            .ok_or_else(|| LpdError::invalid(format!("{rel} has no triples")))?;
        triples.shuffle(&mut rng);
        for i in 0..per_relation {
            let t = triples[i % triples.len()];
            out.push(sentence(
                kg.entity_name(t.head),
                kg.entity_name(t.tail),
                rel,
                cues,
                params,
                &mut rng,
            ));
        }
    }
    Ok(out)
}

fn sentence(
    head: &str,
    tail: &str,
    relation: RelationId,
    cues: &[String],
    p: &TextParams,
    rng: &mut impl Rng,
) -> Instance {
    let n_cues = rng.random_range(p.cues_min..=p.cues_max.min(cues.len()));
    let n_distract = rng.random_range(p.distractors_min..=p.distractors_max);
    let n_conn = rng.random_range(p.connectives_min..=p.connectives_max);

    let mut words: Vec<&str> = cues.choose_multiple(rng, n_cues).map(String::as_str).collect();
    let others: Vec<&str> = FEATURE_WORDS
        .iter()
        .copied()
        .filter(|w| !cues.iter().any(|c| c == w))
        .collect();
    words.extend(others.choose_multiple(rng, n_distract).copied());
    words.extend((0..n_conn).map(|_| *CONNECTIVES.choose(rng).expect("connectives")));
    words.shuffle(rng);

    // Two insertion points; the first gets whichever entity leads.
    let mut cut = [rng.random_range(0..=words.len()), rng.random_range(0..=words.len())];
    cut.sort_unstable();
    let head_first = rng.random_bool(p.head_first_prob);
    let (first, second) = if head_first {
        (head, tail)
    } else {
        (tail, head)
    };

    let mut tokens: Vec<String> = Vec::with_capacity(words.len() + 6);
    tokens.extend(words[..cut[0]].iter().map(|w| w.to_string()));
    let s1 = tokens.len();
    tokens.extend(first.split_whitespace().map(String::from));
    let e1 = tokens.len();
    tokens.extend(words[cut[0]..cut[1]].iter().map(|w| w.to_string()));
    let s2 = tokens.len();
    tokens.extend(second.split_whitespace().map(String::from));
    let e2 = tokens.len();
    tokens.extend(words[cut[1]..].iter().map(|w| w.to_string()));

    let (first_span, second_span) = (Span::new(s1, e1), Span::new(s2, e2));
    let (head_span, tail_span) = if head_first {
        (first_span, second_span)
    } else {
        (second_span, first_span)
    };
    Instance {
        tokens,
        head_span,
        tail_span,
        relation_id: relation,
        domain_tag: DEFAULT_DOMAIN.to_string(),
    }
}
