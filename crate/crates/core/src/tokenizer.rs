//! Word-level vocabulary and conversion of instances into marked id
//! sequences, optionally prefixed by a label prompt.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::corpus::{Instance, RelationType, BLANK_TOKEN};
use crate::error::{check_probability, LpdError, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
pub const BLANK: TokenId = 5;
pub const E1_OPEN: TokenId = 6;
pub const E1_CLOSE: TokenId = 7;
pub const E2_OPEN: TokenId = 8;
pub const E2_CLOSE: TokenId = 9;
pub const COLON: TokenId = 10;

pub const SPECIAL_TOKENS: [&str; 11] = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", BLANK_TOKEN, "[E1]", "[/E1]", "[E2]", "[/E2]", ":",
];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Vocabulary from an explicit token list; the first entries must be the
    /// special tokens in their reserved order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(LpdError::format("vocab", "special tokens must come first"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(LpdError::format("vocab", format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a corpus word. Words spelled like a special token map to UNK so
    /// text can never inject markers.
    pub fn id(&self, token: &str) -> TokenId {
        match self.index.get(token) {
            Some(&id) if !is_special(id) => id,
            _ => UNK,
        }
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or("[UNK]", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.token(id)).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(String::from).collect())
    }
}

/// Vocabulary over corpus and description words, most frequent first, ties
/// broken lexicographically.
pub fn build_vocab(corpus: &[Instance], relations: &[RelationType]) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(LpdError::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let words = corpus
        .iter()
        .flat_map(|inst| inst.tokens.iter().map(String::as_str))
        .chain(relations.iter().flat_map(|r| r.description.split_whitespace()));
    for w in words {
        if !SPECIAL_TOKENS.contains(&w) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(w, _)| w.to_string()))
        .collect();
    Vocab::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub token_ids: Vec<TokenId>,
    pub e1_open_pos: usize,
    pub e2_open_pos: usize,
    /// Description plus colon; zero without a prompt.
    pub prompt_len: usize,
    /// (position, original id) for masked-language-model targets.
    pub mlm_targets: Vec<(usize, TokenId)>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// `[CLS] (description : )? sentence-with-markers [SEP]`. Only trailing
/// sentence words are truncated.
pub fn encode_instance(
    instance: &Instance,
    prompt: Option<&str>,
    vocab: &Vocab,
    max_length: usize,
) -> Result<EncodedInput> {
    instance.validate()?;
    let mut ids = vec![CLS];
    if let Some(p) = prompt {
        ids.extend(p.split_whitespace().map(|w| vocab.id(w)));
        ids.push(COLON);
    }
    let prompt_len = ids.len() - 1;

    let (h, t) = (instance.head_span, instance.tail_span);
    let mut sentence = Vec::with_capacity(instance.tokens.len() + 4);
    let mut e1 = 0;
    let mut e2 = 0;
    let mut last_marker = 0;
    for (i, tok) in instance.tokens.iter().enumerate() {
        if i == h.start {
            e1 = sentence.len();
            sentence.push(E1_OPEN);
        }
        if i == t.start {
            e2 = sentence.len();
            sentence.push(E2_OPEN);
        }
        sentence.push(if tok == BLANK_TOKEN { BLANK } else { vocab.id(tok) });
        if i + 1 == h.end {
            sentence.push(E1_CLOSE);
            last_marker = sentence.len();
        }
        if i + 1 == t.end {
            sentence.push(E2_CLOSE);
            last_marker = sentence.len();
        }
    }

    let fixed = ids.len() + 1;
    if fixed + last_marker > max_length {
        return Err(LpdError::Truncation {
            max_length,
            needed: fixed + last_marker,
        });
    }
    sentence.truncate(max_length - fixed);
    let offset = ids.len();
    ids.extend(sentence);
    ids.push(SEP);
    Ok(EncodedInput {
        token_ids: ids,
        e1_open_pos: offset + e1,
        e2_open_pos: offset + e2,
        prompt_len,
        mlm_targets: Vec::new(),
    })
}

/// BERT-style masking: each eligible token is selected with `mask_prob`;
/// a selected token becomes MASK (80%), a random word (10%) or stays (10%).
/// Special tokens are never selected; prompt words only when `mask_prompt`.
pub fn mask_for_mlm<R: Rng + ?Sized>(
    encoded: &EncodedInput,
    mask_prob: f64,
    mask_prompt: bool,
    vocab_size: usize,
    rng: &mut R,
) -> Result<EncodedInput> {
    check_probability("mask_prob", mask_prob)?;
    if !encoded.mlm_targets.is_empty() {
        return Err(LpdError::invalid("input already carries MLM targets"));
    }
    let mut out = encoded.clone();
    let prompt_end = 1 + encoded.prompt_len;
    for (pos, id) in out.token_ids.iter_mut().enumerate() {
        if is_special(*id) || (!mask_prompt && pos < prompt_end) {
            continue;
        }
        if !rng.random_bool(mask_prob) {
            continue;
        }
        out.mlm_targets.push((pos, *id));
        let r: f64 = rng.random();
        if r < 0.8 {
            *id = MASK;
        } else if r < 0.9 && vocab_size > NUM_SPECIAL {
            *id = rng.random_range(NUM_SPECIAL as TokenId..vocab_size as TokenId);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{blank_spans, RelationId, Span, DEFAULT_DOMAIN};
    use crate::rng::seeded;

    fn olympics() -> Instance {
        Instance {
            tokens: "Beijing held the 2022 winter Olympics"
                .split_whitespace()
                .map(String::from)
                .collect(),
            head_span: Span::new(0, 1),
            tail_span: Span::new(3, 6),
            relation_id: RelationId(0),
            domain_tag: DEFAULT_DOMAIN.into(),
        }
    }

    fn vocab_for(inst: &Instance, desc: &str) -> Vocab {
        let rel = RelationType {
            id: RelationId(0),
            name: "loc".into(),
            description: desc.into(),
        };
        build_vocab(std::slice::from_ref(inst), &[rel]).unwrap()
    }

    #[test]
    fn prompt_layout_matches_reference_example() {
        let inst = olympics();
        let vocab = vocab_for(&inst, "location of event");
        let enc = encode_instance(&inst, Some("location of event"), &vocab, 64).unwrap();
        assert_eq!(
            vocab.decode(&enc.token_ids),
            "[CLS] location of event : [E1] Beijing [/E1] held the [E2] 2022 winter Olympics [/E2] [SEP]"
        );
        assert_eq!(enc.prompt_len, 4);
        assert_eq!(enc.token_ids[enc.e1_open_pos], E1_OPEN);
        assert_eq!(enc.token_ids[enc.e2_open_pos], E2_OPEN);
    }

    #[test]
    fn no_prompt_layout() {
        let inst = olympics();
        let vocab = vocab_for(&inst, "location of event");
        let enc = encode_instance(&inst, None, &vocab, 64).unwrap();
        assert_eq!(
            vocab.decode(&enc.token_ids),
            "[CLS] [E1] Beijing [/E1] held the [E2] 2022 winter Olympics [/E2] [SEP]"
        );
        assert_eq!(enc.prompt_len, 0);
        assert_eq!(enc.e1_open_pos, 1);
    }

    #[test]
    fn blanked_head_is_marked() {
        let inst = blank_spans(&olympics(), true, false);
        let vocab = vocab_for(&olympics(), "x");
        let enc = encode_instance(&inst, None, &vocab, 64).unwrap();
        let s = vocab.decode(&enc.token_ids);
        assert!(s.starts_with("[CLS] [E1] [BLANK] [/E1] held"), "{s}");
    }

    #[test]
    fn vocab_counts_and_unknowns() {
        let inst = olympics();
        let vocab = vocab_for(&inst, "location of event the");
        // 6 sentence words + location, of, event (the is shared)
        assert_eq!(vocab.len(), 9 + NUM_SPECIAL);
        assert_eq!(vocab.id("never-seen"), UNK);
        assert_eq!(vocab.id("[E1]"), UNK);
        assert_eq!(vocab, vocab_for(&inst, "location of event the"));
        // most frequent first
        assert_eq!(vocab.token(NUM_SPECIAL as TokenId), "the");
    }

    #[test]
    fn truncation_keeps_markers_or_fails() {
        let inst = Instance {
            tokens: "a b c d e f g h".split_whitespace().map(String::from).collect(),
            head_span: Span::new(0, 1),
            tail_span: Span::new(2, 3),
            relation_id: RelationId(0),
            domain_tag: DEFAULT_DOMAIN.into(),
        };
        let vocab = vocab_for(&inst, "p q");
        // [CLS] [E1] a [/E1] b [E2] c [/E2] ... [SEP] -> 9 tokens at minimum
        let enc = encode_instance(&inst, None, &vocab, 9).unwrap();
        assert_eq!(enc.len(), 9);
        assert_eq!(*enc.token_ids.last().unwrap(), SEP);
        assert!(matches!(
            encode_instance(&inst, None, &vocab, 8),
            Err(LpdError::Truncation { .. })
        ));
        assert!(encode_instance(&inst, Some("p q"), &vocab, 11).is_err());
        assert!(encode_instance(&inst, Some("p q"), &vocab, 12).is_ok());
    }

    #[test]
    fn masking_zero_prob_and_specials() {
        let inst = olympics();
        let vocab = vocab_for(&inst, "location of event");
        let enc = encode_instance(&inst, Some("location of event"), &vocab, 64).unwrap();
        let mut rng = seeded(4);
        let none = mask_for_mlm(&enc, 0.0, true, vocab.len(), &mut rng).unwrap();
        assert!(none.mlm_targets.is_empty());
        assert_eq!(none.token_ids, enc.token_ids);
        let all = mask_for_mlm(&enc, 1.0, false, vocab.len(), &mut rng).unwrap();
        assert!(all.mlm_targets.iter().all(|&(p, id)| p > enc.prompt_len && !is_special(id)));
        assert!(mask_for_mlm(&all, 0.1, true, vocab.len(), &mut rng).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let inst = olympics();
        let vocab = vocab_for(&inst, "location of event");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        vocab.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), vocab);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("[PAD]\n[UNK]\n[CLS]"));
    }
}
