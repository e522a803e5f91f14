//! Word, relative-position and entity embeddings, and the position-wise gate
//! that mixes entity features into each token.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::data::{SentenceExample, Vocab};
use crate::error::{Result, SegError};
use crate::numerics::{ParamId, Tape, Tensor, Var};

/// Embedding tables. Entity embeddings are rows of `word` selected by the
/// entity surface-form ids.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTables<H> {
    /// `[V, d_w]`
    pub word: H,
    /// `[2K+1, d_r]`, indexed by clipped relative offset.
    pub position: H,
}

/// Gate weights for the entity-aware mix. Distinct from the bag-level
/// selective gate weights even though both are "gate" parameters.
#[derive(Clone, Copy, Debug)]
pub struct EntityAwareGateParams<H> {
    /// `[d_h, 3·d_w]`
    pub w_g1: H,
    pub b_g1: H,
    /// `[d_h, d_p]`
    pub w_g2: H,
    pub b_g2: H,
}

impl EmbeddingTables<ParamId> {
    pub fn on_tape(&self, leaves: &[Var]) -> EmbeddingTables<Var> {
        EmbeddingTables {
            word: leaves[self.word.index()],
            position: leaves[self.position.index()],
        }
    }
}

impl EntityAwareGateParams<ParamId> {
    pub fn on_tape(&self, leaves: &[Var]) -> EntityAwareGateParams<Var> {
        EntityAwareGateParams {
            w_g1: leaves[self.w_g1.index()],
            b_g1: leaves[self.b_g1.index()],
            w_g2: leaves[self.w_g2.index()],
            b_g2: leaves[self.b_g2.index()],
        }
    }
}

/// `clip(i - e, -K, K) + K`, a row of the position table.
pub fn relative_offset_bucket(i: usize, e: usize, k: usize) -> usize {
    let offset = i as i64 - e as i64;
    (offset.clamp(-(k as i64), k as i64) + k as i64) as usize
}

fn ids(tokens: &[u32]) -> Vec<usize> {
    tokens.iter().map(|&t| t as usize).collect()
}

/// `X^(p)`: each column is `[word; pos(head); pos(tail)]`, shape `[d_w + 2·d_r, n]`.
pub fn embed_positional(
    tape: &mut Tape<'_>,
    s: &SentenceExample,
    tables: &EmbeddingTables<Var>,
    clip: usize,
) -> Result<Var> {
    let n = s.tokens.len();
    let words = tape.gather_columns(tables.word, &ids(&s.tokens))?;
    let head: Vec<usize> = (0..n).map(|i| relative_offset_bucket(i, s.head_pos, clip)).collect();
    let tail: Vec<usize> = (0..n).map(|i| relative_offset_bucket(i, s.tail_pos, clip)).collect();
    let rh = tape.gather_columns(tables.position, &head)?;
    let rt = tape.gather_columns(tables.position, &tail)?;
    tape.concat(&[words, rh, rt])
}

/// `X^(e)`: each column is `[word; v_head; v_tail]`, shape `[3·d_w, n]`.
pub fn embed_entity_concat(
    tape: &mut Tape<'_>,
    s: &SentenceExample,
    tables: &EmbeddingTables<Var>,
) -> Result<Var> {
    let n = s.tokens.len();
    let words = tape.gather_columns(tables.word, &ids(&s.tokens))?;
    let head = tape.gather_columns(tables.word, &vec![s.head_word as usize; n])?;
    let tail = tape.gather_columns(tables.word, &vec![s.tail_word as usize; n])?;
    tape.concat(&[words, head, tail])
}

/// Position-wise gate between entity features and projected positional
/// features:
///
/// ```text
/// α  = sigmoid(λ · (W_g1 X_e + b_g1))
/// X̃p = tanh(W_g2 X_p + b_g2)
/// X  = α ⊙ X_e + (1 − α) ⊙ X̃p
/// ```
pub fn entity_aware_embed(
    tape: &mut Tape<'_>,
    x_p: Var,
    x_e: Var,
    gate: &EntityAwareGateParams<Var>,
    lambda: f64,
) -> Result<Var> {
    let pre = tape.affine(gate.w_g1, x_e, gate.b_g1)?;
    let scaled = tape.scale(pre, lambda);
    let alpha = tape.sigmoid(scaled);
    let proj = tape.affine(gate.w_g2, x_p, gate.b_g2)?;
    let x_p_tilde = tape.tanh(proj);
    let a = tape.mul(alpha, x_e)?;
    let one_minus = tape.one_minus(alpha);
    let b = tape.mul(one_minus, x_p_tilde)?;
    tape.add(a, b)
}

/// Overwrites rows of `table` (`[V, d_w]`) from a whitespace-separated text
/// file of `word v_1 … v_dw` lines. Words absent from `vocab` are skipped.
/// Returns the number of rows replaced.
pub fn load_pretrained(path: impl AsRef<Path>, vocab: &Vocab, table: &mut Tensor) -> Result<usize> {
    let path = path.as_ref();
    let (rows, d_w) = table
        .dims2()
        .ok_or_else(|| SegError::Config("word table must be a matrix".into()))?;
    let file = File::open(path).map_err(|e| SegError::io(path, e))?;
    let mut replaced = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SegError::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| SegError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("{e}"),
            })?;
        if values.len() != d_w {
            return Err(SegError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {d_w} values, found {}", values.len()),
            });
        }
        if let Some(id) = vocab.get(word).map(|id| id as usize).filter(|&id| id < rows) {
            table.data_mut()[id * d_w..(id + 1) * d_w].copy_from_slice(&values);
            replaced += 1;
        }
    }
    Ok(replaced)
}
