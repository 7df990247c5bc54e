//! Synthetic knowledge graph and sentence corpus, distant-supervision pair
//! sampling, entity blanking and leakage filtering.

mod generate;
mod kg;
mod pairs;

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_probability, LpdError, Result};

pub use generate::{generate_corpus, generate_corpus_for, TextParams};
pub use kg::{generate_kg, generate_kg_with, Entity, EntityId, KgParams, KnowledgeGraph, Triple};
pub use pairs::{sample_pairs, PairSample, PairSampler, PairStream};

/// Surface form of a blanked entity mention inside `Instance::tokens`.
pub const BLANK_TOKEN: &str = "[BLANK]";
pub const DEFAULT_DOMAIN: &str = "general";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub id: RelationId,
    pub name: String,
    /// Whitespace-separated description, used verbatim as the label prompt.
    pub description: String,
}

impl RelationType {
    pub fn description_tokens(&self) -> Vec<&str> {
        self.description.split_whitespace().collect()
    }
}

/// Half-open token range `[start, end)`. Serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub head_span: Span,
    pub tail_span: Span,
    pub relation_id: RelationId,
    #[serde(default = "default_domain")]
    pub domain_tag: String,
}

fn default_domain() -> String {
    DEFAULT_DOMAIN.to_string()
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        for (name, span) in [("head", self.head_span), ("tail", self.tail_span)] {
            if span.is_empty() || span.end > n {
                return Err(LpdError::invalid(format!(
                    "{name} span {:?} invalid for {n} tokens",
                    (span.start, span.end)
                )));
            }
        }
        if self.head_span.overlaps(&self.tail_span) {
            return Err(LpdError::invalid("head and tail spans overlap"));
        }
        Ok(())
    }

    pub fn head_tokens(&self) -> &[String] {
        &self.tokens[self.head_span.start..self.head_span.end]
    }

    pub fn tail_tokens(&self) -> &[String] {
        &self.tokens[self.tail_span.start..self.tail_span.end]
    }

    pub fn head_text(&self) -> String {
        self.head_tokens().join(" ")
    }

    pub fn tail_text(&self) -> String {
        self.tail_tokens().join(" ")
    }
}

/// Replace each entity span by a single blank token, independently with
/// probability `rho_blank`. Tokens outside the spans are untouched.
pub fn blank_entities<R: Rng + ?Sized>(
    instance: &Instance,
    rho_blank: f64,
    rng: &mut R,
) -> Result<Instance> {
    check_probability("rho_blank", rho_blank)?;
    let blank_head = rng.random_bool(rho_blank);
    let blank_tail = rng.random_bool(rho_blank);
    Ok(blank_spans(instance, blank_head, blank_tail))
}

pub(crate) fn blank_spans(instance: &Instance, blank_head: bool, blank_tail: bool) -> Instance {
    let mut out = instance.clone();
    // Rewrite the later span first so the earlier span's indices stay valid.
    let mut edits = [(true, instance.head_span, blank_head), (false, instance.tail_span, blank_tail)];
    edits.sort_by_key(|(_, span, _)| std::cmp::Reverse(span.start));
    for (is_head, span, blank) in edits {
        if !blank {
            continue;
        }
        let removed = span.len() - 1;
        out.tokens
            .splice(span.start..span.end, std::iter::once(BLANK_TOKEN.to_string()));
        let new_span = Span::new(span.start, span.start + 1);
        let (this, other) = if is_head {
            (&mut out.head_span, &mut out.tail_span)
        } else {
            (&mut out.tail_span, &mut out.head_span)
        };
        *this = new_span;
        if other.start >= span.end {
            other.start -= removed;
            other.end -= removed;
        }
    }
    out
}

/// Drop every instance whose relation is in `benchmark`, preserving order.
pub fn filter_leakage(corpus: &[Instance], benchmark: &BTreeSet<RelationId>) -> Vec<Instance> {
    corpus
        .iter()
        .filter(|inst| !benchmark.contains(&inst.relation_id))
        .cloned()
        .collect()
}

pub fn relation_ids(corpus: &[Instance]) -> BTreeSet<RelationId> {
    corpus.iter().map(|inst| inst.relation_id).collect()
}

pub fn write_corpus(path: &Path, corpus: &[Instance]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for inst in corpus {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Instance>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| {
            LpdError::format("corpus record", format!("line {}: {e}", lineno + 1))
        })?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}
