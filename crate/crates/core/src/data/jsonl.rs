use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Bag, Dataset, SentenceExample, Vocab, DEFAULT_BAG_CAP, DEFAULT_MAX_LEN, NA_NAME, UNK};
use crate::error::{Result, SegError};

#[derive(Debug, Serialize, Deserialize)]
struct EntityMention {
    text: String,
    position: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    tokens: Vec<String>,
    head: EntityMention,
    tail: EntityMention,
    relation: String,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub max_len: usize,
    pub bag_cap: usize,
    /// Relation table with `NA` first. Empty means: derive from the file,
    /// `NA` followed by relations in order of first appearance.
    pub relations: Vec<String>,
    /// Frozen word vocabulary (e.g. from a checkpoint). Unknown words map to
    /// `UNK`. `None` builds a vocabulary from the file.
    pub word_vocab: Option<Vocab>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            max_len: DEFAULT_MAX_LEN,
            bag_cap: DEFAULT_BAG_CAP,
            relations: Vec::new(),
            word_vocab: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub lines: usize,
    pub accepted: usize,
    /// Sentences dropped because an entity sat beyond `max_len`.
    pub dropped_entity_beyond_max_len: usize,
    pub truncated: usize,
    /// Sentences dropped because their bag was already at `bag_cap`.
    pub dropped_over_bag_cap: usize,
}

#[derive(Clone, Debug)]
pub struct Loaded {
    pub dataset: Dataset,
    pub stats: LoadStats,
}

/// Reads one JSON object per line and groups sentences into bags keyed by
/// `(head, tail, relation)`, in order of first appearance.
pub fn load_jsonl(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Loaded> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| SegError::io(path, e))?;
    let reader = BufReader::new(file);

    let mut lines = Vec::new();
    for (i, raw) in reader.lines().enumerate() {
        let raw = raw.map_err(|e| SegError::io(path, e))?;
        if raw.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| SegError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let line: Line = serde_json::from_str(&raw).map_err(|e| parse_err(e.to_string()))?;
        let n = line.tokens.len();
        if n == 0 {
            return Err(parse_err("empty token list".into()));
        }
        if line.head.position >= n || line.tail.position >= n {
            return Err(parse_err(format!(
                "entity position ({}, {}) outside {n} tokens",
                line.head.position, line.tail.position
            )));
        }
        if line.head.position == line.tail.position {
            return Err(parse_err("head and tail share a position".into()));
        }
        lines.push((i + 1, line));
    }

    let relations = if opts.relations.is_empty() {
        let mut rels = vec![NA_NAME.to_string()];
        for (_, l) in &lines {
            if !rels.contains(&l.relation) {
                rels.push(l.relation.clone());
            }
        }
        rels
    } else {
        if opts.relations[0] != NA_NAME {
            return Err(SegError::Config(format!(
                "relation table must start with {NA_NAME}, found {}",
                opts.relations[0]
            )));
        }
        opts.relations.clone()
    };
    let rel_index: HashMap<&str, usize> = relations
        .iter()
        .enumerate()
        .map(|(i, r)| (r.as_str(), i))
        .collect();

    let frozen = opts.word_vocab.is_some();
    let mut words = opts.word_vocab.clone().unwrap_or_else(Vocab::with_reserved);
    let mut entities = Vocab::new();
    let word_id = |words: &mut Vocab, t: &str| {
        if frozen {
            words.get(t).unwrap_or(UNK)
        } else {
            words.insert(t)
        }
    };

    let mut stats = LoadStats {
        lines: lines.len(),
        ..LoadStats::default()
    };
    let mut bags: Vec<Bag> = Vec::new();
    let mut by_key: HashMap<(u32, u32, usize), usize> = HashMap::new();

    for (line_no, line) in lines {
        let label = *rel_index.get(line.relation.as_str()).ok_or_else(|| SegError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!(
                "unknown relation {:?}; known relations: {}",
                line.relation,
                relations.join(", ")
            ),
        })?;
        if line.head.position >= opts.max_len || line.tail.position >= opts.max_len {
            stats.dropped_entity_beyond_max_len += 1;
            continue;
        }
        let mut toks = line.tokens;
        if toks.len() > opts.max_len {
            toks.truncate(opts.max_len);
            stats.truncated += 1;
        }
        let tokens = toks.iter().map(|t| word_id(&mut words, t)).collect();
        let head_id = entities.insert(&line.head.text);
        let tail_id = entities.insert(&line.tail.text);
        let sentence = SentenceExample {
            tokens,
            head_pos: line.head.position,
            tail_pos: line.tail.position,
            head_id,
            tail_id,
            head_word: word_id(&mut words, &line.head.text),
            tail_word: word_id(&mut words, &line.tail.text),
        };
        let key = (head_id, tail_id, label);
        let idx = *by_key.entry(key).or_insert_with(|| {
            bags.push(Bag {
                head_id,
                tail_id,
                label,
                sentences: Vec::new(),
            });
            bags.len() - 1
        });
        if bags[idx].sentences.len() >= opts.bag_cap {
            stats.dropped_over_bag_cap += 1;
            continue;
        }
        bags[idx].sentences.push(sentence);
        stats.accepted += 1;
    }

    if stats.dropped_entity_beyond_max_len > 0 {
        log::warn!(
            "{}: dropped {} sentences with an entity beyond max_len {}",
            path.display(),
            stats.dropped_entity_beyond_max_len,
            opts.max_len
        );
    }
    if stats.dropped_over_bag_cap > 0 {
        log::warn!(
            "{}: dropped {} sentences beyond bag cap {}",
            path.display(),
            stats.dropped_over_bag_cap,
            opts.bag_cap
        );
    }

    Ok(Loaded {
        dataset: Dataset {
            bags,
            relation_names: relations,
            word_vocab: words,
            entity_vocab: entities,
        },
        stats,
    })
}

/// Writes `ds` back out in the JSONL input format, one line per sentence.
pub fn write_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| SegError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let word = |id: u32| ds.word_vocab.token(id).unwrap_or("<unk>").to_string();
    let entity = |id: u32| ds.entity_vocab.token(id).unwrap_or("<unk>").to_string();
    for bag in &ds.bags {
        for s in &bag.sentences {
            let line = Line {
                tokens: s.tokens.iter().map(|&t| word(t)).collect(),
                head: EntityMention {
                    text: entity(s.head_id),
                    position: s.head_pos,
                },
                tail: EntityMention {
                    text: entity(s.tail_id),
                    position: s.tail_pos,
                },
                relation: ds.relation_names[bag.label].clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| SegError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| SegError::io(path, e))
}
