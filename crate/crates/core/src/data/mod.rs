//! Bag-structured datasets, JSONL ingestion and the synthetic noisy-bag
//! generator.

mod jsonl;
mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use jsonl::{load_jsonl, write_jsonl, LoadOptions, LoadStats, Loaded};
pub use synth::{generate_synthetic, NoiseManifest, SynthData, SynthSpec};

pub const UNK: u32 = 0;
pub const PAD: u32 = 1;
pub const NA: usize = 0;
pub const NA_NAME: &str = "NA";

pub const DEFAULT_MAX_LEN: usize = 120;
pub const DEFAULT_BAG_CAP: usize = 20;

/// String ↔ id table. Word vocabularies reserve `UNK = 0` and `PAD = 1`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Word vocabulary with the two reserved entries.
    pub fn with_reserved() -> Self {
        Vocab::from(vec!["<unk>".to_string(), "<pad>".to_string()])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(id) = self.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One tokenized sentence with its two entity mentions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceExample {
    pub tokens: Vec<u32>,
    pub head_pos: usize,
    pub tail_pos: usize,
    /// Entity vocabulary ids.
    pub head_id: u32,
    pub tail_id: u32,
    /// Word ids of the entity surface forms, used for entity embeddings.
    pub head_word: u32,
    pub tail_word: u32,
}

impl SentenceExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, max_len: usize, vocab_len: usize) -> Result<(), String> {
        let n = self.tokens.len();
        if n == 0 || n > max_len {
            return Err(format!("sentence length {n} outside 1..={max_len}"));
        }
        if self.head_pos >= n || self.tail_pos >= n {
            return Err(format!(
                "entity positions ({}, {}) outside sentence of length {n}",
                self.head_pos, self.tail_pos
            ));
        }
        if self.head_pos == self.tail_pos {
            return Err(format!("head and tail share position {}", self.head_pos));
        }
        let bad = self
            .tokens
            .iter()
            .chain([&self.head_word, &self.tail_word])
            .find(|&&t| t as usize >= vocab_len);
        if let Some(t) = bad {
            return Err(format!("word id {t} outside vocabulary of {vocab_len}"));
        }
        Ok(())
    }
}

/// Sentences sharing one entity pair, with one distant-supervision label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bag {
    pub head_id: u32,
    pub tail_id: u32,
    pub label: usize,
    pub sentences: Vec<SentenceExample>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub relation_names: Vec<String>,
    pub word_vocab: Vocab,
    pub entity_vocab: Vocab,
}

impl Dataset {
    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn num_sentences(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    pub fn with_bags(&self, bags: Vec<Bag>) -> Dataset {
        Dataset {
            bags,
            relation_names: self.relation_names.clone(),
            word_vocab: self.word_vocab.clone(),
            entity_vocab: self.entity_vocab.clone(),
        }
    }

    /// Checks every structural invariant; `Err` names the first violation.
    pub fn validate(&self, max_len: usize, bag_cap: usize) -> Result<(), String> {
        if self.relation_names.first().map(String::as_str) != Some(NA_NAME) {
            return Err("relation 0 must be NA".into());
        }
        for (b, bag) in self.bags.iter().enumerate() {
            if bag.sentences.is_empty() || bag.sentences.len() > bag_cap {
                return Err(format!("bag {b}: {} sentences", bag.sentences.len()));
            }
            if bag.label >= self.relation_names.len() {
                return Err(format!("bag {b}: label {} out of range", bag.label));
            }
            for s in &bag.sentences {
                if (s.head_id, s.tail_id) != (bag.head_id, bag.tail_id) {
                    return Err(format!("bag {b}: sentence entity pair differs from bag"));
                }
                s.validate(max_len, self.word_vocab.len())
                    .map_err(|e| format!("bag {b}: {e}"))?;
            }
        }
        Ok(())
    }
}

/// Hex SHA-256 over the word vocabulary and relation table, the parts of a
/// dataset a trained model depends on.
pub fn vocab_fingerprint(words: &Vocab, relations: &[String]) -> String {
    let mut h = Sha256::new();
    for t in words.tokens() {
        h.update(t.as_bytes());
        h.update([0u8]);
    }
    h.update([1u8]);
    for r in relations {
        h.update(r.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// A bag of `num_sentences` random sentences over word ids `[2, vocab_size)`,
/// each 2 to `max_tokens` long with distinct entity positions. Meant for
/// gradient checks and property tests.
pub fn random_bag(
    rng: &mut impl rand::Rng,
    vocab_size: usize,
    num_relations: usize,
    num_sentences: usize,
    max_tokens: usize,
) -> Bag {
    assert!(vocab_size > 2 && max_tokens >= 2 && num_sentences >= 1);
    let sentences = (0..num_sentences)
        .map(|_| {
            let n = rng.gen_range(2..=max_tokens);
            let tokens: Vec<u32> = (0..n).map(|_| rng.gen_range(2..vocab_size as u32)).collect();
            let head_pos = rng.gen_range(0..n);
            let tail_pos = (head_pos + rng.gen_range(1..n)) % n;
            SentenceExample {
                head_word: tokens[head_pos],
                tail_word: tokens[tail_pos],
                tokens,
                head_pos,
                tail_pos,
                head_id: 0,
                tail_id: 1,
            }
        })
        .collect();
    Bag { head_id: 0, tail_id: 1, label: rng.gen_range(0..num_relations), sentences }
}

/// Keeps exactly the bags with a single sentence.
pub fn filter_one_sentence(ds: &Dataset) -> Dataset {
    ds.with_bags(ds.bags.iter().filter(|b| b.len() == 1).cloned().collect())
}
