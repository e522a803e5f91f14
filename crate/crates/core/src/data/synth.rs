//! Planted-truth generator for distantly supervised bags.
//!
//! Every relation owns a disjoint set of signature words. A clean sentence
//! for relation `r` places some of `r`'s signature words between the two
//! entity mentions inside filler text. Entities carry a latent type, and each
//! non-NA relation links a fixed (head type, tail type) pair, so entity
//! identity is informative about the relation.
//!
//! A noisy bag keeps the true relation of its entity pair as its label, but
//! its sentences are written with another relation's signature words: the
//! knowledge-base fact is right, the text does not express it.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bag, Dataset, SentenceExample, Vocab, DEFAULT_BAG_CAP, NA, NA_NAME};
use crate::error::{Result, SegError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Relation count including NA.
    pub num_relations: usize,
    pub num_entities: usize,
    /// Number of non-entity words (signature plus filler).
    pub vocab_size: usize,
    pub num_bags: usize,
    pub num_test_bags: usize,
    pub one_sentence_fraction: f64,
    pub noise_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub num_entity_types: usize,
    pub signature_size: usize,
    pub signature_per_sentence: usize,
    /// Probability that a sentence also carries one signature word of an
    /// unrelated relation, placed outside the entity span.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_relations: 8,
            num_entities: 200,
            vocab_size: 300,
            num_bags: 1000,
            num_test_bags: 500,
            one_sentence_fraction: 0.8,
            noise_rate: 0.35,
            min_len: 8,
            max_len: 24,
            num_entity_types: 4,
            signature_size: 4,
            signature_per_sentence: 2,
            distractor_rate: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SegError::Config(m));
        if self.num_relations < 2 {
            return err(format!("num_relations must be ≥ 2, got {}", self.num_relations));
        }
        for (name, v) in [
            ("num_entities", self.num_entities),
            ("vocab_size", self.vocab_size),
            ("num_bags", self.num_bags),
            ("num_entity_types", self.num_entity_types),
            ("signature_size", self.signature_size),
            ("signature_per_sentence", self.signature_per_sentence),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("one_sentence_fraction", self.one_sentence_fraction),
            ("noise_rate", self.noise_rate),
            ("distractor_rate", self.distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.num_entities < 2 * self.num_entity_types {
            return err(format!(
                "need at least two entities per type: {} entities for {} types",
                self.num_entities, self.num_entity_types
            ));
        }
        let signature_words = self.num_relations * self.signature_size;
        if self.vocab_size < signature_words + self.signature_size {
            return err(format!(
                "vocab_size {} too small for {} disjoint signatures of {} words plus filler",
                self.vocab_size, self.num_relations, self.signature_size
            ));
        }
        let min_len = self.min_len.max(self.signature_per_sentence + 3);
        if self.max_len < min_len {
            return err(format!(
                "max_len {} cannot hold two entities and {} signature words",
                self.max_len, self.signature_per_sentence
            ));
        }
        Ok(())
    }

    fn signature(&self, relation: usize) -> std::ops::Range<u32> {
        let s = self.signature_size;
        (relation * s) as u32..((relation + 1) * s) as u32
    }
}

/// Ground truth written next to the synthetic corpus. Never read by training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseManifest {
    pub spec: SynthSpec,
    pub train_noisy: Vec<bool>,
    /// Relation whose signature words were used for each training bag.
    pub train_content_relation: Vec<usize>,
    pub test_noisy: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: Dataset,
    pub test: Dataset,
    pub manifest: NoiseManifest,
}

struct World {
    entity_type: Vec<usize>,
    by_type: Vec<Vec<u32>>,
    relation_types: Vec<(usize, usize)>,
    /// Word-vocab id of entity `e` is `entity_word_base + e`.
    entity_word_base: u32,
}

/// Word vocab ids: reserved `<unk>`, `<pad>`, then `w0..w{V-1}`, then
/// entity surface forms `E0..`. Synthetic word `k` has id `k + 2`.
const WORD_OFFSET: u32 = 2;

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut words = Vocab::with_reserved();
    for k in 0..spec.vocab_size {
        words.insert(&format!("w{k}"));
    }
    let entity_word_base = words.len() as u32;
    let mut entities = Vocab::new();
    for e in 0..spec.num_entities {
        words.insert(&format!("E{e}"));
        entities.insert(&format!("E{e}"));
    }

    let entity_type: Vec<usize> = (0..spec.num_entities)
        .map(|e| e % spec.num_entity_types)
        .collect();
    let mut by_type = vec![Vec::new(); spec.num_entity_types];
    for (e, &t) in entity_type.iter().enumerate() {
        by_type[t].push(e as u32);
    }
    let relation_types = (0..spec.num_relations)
        .map(|_| {
            (
                rng.gen_range(0..spec.num_entity_types),
                rng.gen_range(0..spec.num_entity_types),
            )
        })
        .collect();
    let world = World {
        entity_type,
        by_type,
        relation_types,
        entity_word_base,
    };

    let mut used = HashSet::new();
    let mut relation_names = vec![NA_NAME.to_string()];
    relation_names.extend((1..spec.num_relations).map(|r| format!("R{r}")));

    let (train_bags, train_noisy, train_content) =
        make_bags(spec, &world, spec.num_bags, spec.noise_rate, &mut used, &mut rng)?;
    let (test_bags, test_noisy, _) =
        make_bags(spec, &world, spec.num_test_bags, 0.0, &mut used, &mut rng)?;

    let ds = |bags| Dataset {
        bags,
        relation_names: relation_names.clone(),
        word_vocab: words.clone(),
        entity_vocab: entities.clone(),
    };
    Ok(SynthData {
        train: ds(train_bags),
        test: ds(test_bags),
        manifest: NoiseManifest {
            spec: spec.clone(),
            train_noisy,
            train_content_relation: train_content,
            test_noisy,
        },
    })
}

type Bags = (Vec<Bag>, Vec<bool>, Vec<usize>);

fn make_bags(
    spec: &SynthSpec,
    world: &World,
    count: usize,
    noise_rate: f64,
    used: &mut HashSet<(u32, u32, usize)>,
    rng: &mut ChaCha8Rng,
) -> Result<Bags> {
    let mut bags = Vec::with_capacity(count);
    let mut noisy = Vec::with_capacity(count);
    let mut content = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.gen_range(0..spec.num_relations);
        let (head, tail) = sample_pair(world, label, used, rng)?;
        used.insert((head, tail, label));

        let is_noisy = rng.gen_bool(noise_rate);
        let content_rel = if is_noisy {
            let other = rng.gen_range(0..spec.num_relations - 1);
            if other >= label {
                other + 1
            } else {
                other
            }
        } else {
            label
        };
        let size = if rng.gen_bool(spec.one_sentence_fraction) {
            1
        } else {
            rng.gen_range(2..=5usize).min(DEFAULT_BAG_CAP)
        };
        let sentences = (0..size)
            .map(|_| make_sentence(spec, world, content_rel, head, tail, rng))
            .collect();
        bags.push(Bag {
            head_id: head,
            tail_id: tail,
            label,
            sentences,
        });
        noisy.push(is_noisy);
        content.push(content_rel);
    }
    Ok((bags, noisy, content))
}

fn sample_pair(
    world: &World,
    relation: usize,
    used: &HashSet<(u32, u32, usize)>,
    rng: &mut ChaCha8Rng,
) -> Result<(u32, u32)> {
    let all: Vec<u32> = (0..world.entity_type.len() as u32).collect();
    let (heads, tails) = if relation == NA {
        (&all, &all)
    } else {
        let (th, tt) = world.relation_types[relation];
        (&world.by_type[th], &world.by_type[tt])
    };
    for _ in 0..1000 {
        let h = *heads.choose(rng).expect("nonempty type");
        let t = *tails.choose(rng).expect("nonempty type");
        if h != t && !used.contains(&(h, t, relation)) {
            return Ok((h, t));
        }
    }
    Err(SegError::Config(
        "entity pool exhausted; raise num_entities or lower the bag counts".into(),
    ))
}

fn make_sentence(
    spec: &SynthSpec,
    world: &World,
    relation: usize,
    head: u32,
    tail: u32,
    rng: &mut ChaCha8Rng,
) -> SentenceExample {
    let k = spec.signature_per_sentence;
    let min_len = spec.min_len.max(k + 3);
    let n = rng.gen_range(min_len..=spec.max_len);
    let filler_lo = (spec.num_relations * spec.signature_size) as u32;
    let filler_hi = spec.vocab_size as u32;
    let mut tokens: Vec<u32> = (0..n)
        .map(|_| rng.gen_range(filler_lo..filler_hi) + WORD_OFFSET)
        .collect();

    // Leave room for k signature words between the two mentions.
    let first = rng.gen_range(0..n - k - 1);
    let second = rng.gen_range(first + k + 1..n);
    let (head_pos, tail_pos) = if rng.gen_bool(0.5) {
        (first, second)
    } else {
        (second, first)
    };
    tokens[head_pos] = world.entity_word_base + head;
    tokens[tail_pos] = world.entity_word_base + tail;

    let mut between: Vec<usize> = (first + 1..second).collect();
    between.shuffle(rng);
    let sig = spec.signature(relation);
    for &pos in between.iter().take(k) {
        tokens[pos] = rng.gen_range(sig.clone()) + WORD_OFFSET;
    }

    if spec.num_relations > 1 && rng.gen_bool(spec.distractor_rate) {
        let outside: Vec<usize> = (0..first).chain(second + 1..n).collect();
        if let Some(&pos) = outside.choose(rng) {
            let other = loop {
                let r = rng.gen_range(0..spec.num_relations);
                if r != relation {
                    break r;
                }
            };
            tokens[pos] = rng.gen_range(spec.signature(other)) + WORD_OFFSET;
        }
    }

    SentenceExample {
        tokens,
        head_pos,
        tail_pos,
        head_id: head,
        tail_id: tail,
        head_word: world.entity_word_base + head,
        tail_word: world.entity_word_base + tail,
    }
}

/// Signature-word relation index for a word id, if it is one.
#[cfg(test)]
fn signature_relation(spec: &SynthSpec, word: u32) -> Option<usize> {
    let k = word.checked_sub(WORD_OFFSET)? as usize;
    (k < spec.num_relations * spec.signature_size).then(|| k / spec.signature_size)
}
