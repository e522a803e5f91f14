//! Checkpoint directory: `manifest.json`, `vocab.json` and `params.bin`.
//!
//! `params.bin` layout, all integers little-endian:
//!
//! ```text
//! b"SEGP" | u32 version | u32 count
//! per tensor: u32 name_len | name (utf-8) | u32 ndim | u64 dims[ndim] | f64 data[prod(dims)]
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SegModel};
use crate::data::{vocab_fingerprint, Vocab};
use crate::error::{Result, SegError};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"SEGP";
const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const VOCAB: &str = "vocab.json";
const PARAMS: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub relations: Vec<String>,
    pub vocab_fingerprint: String,
    /// Optimizer steps completed when the checkpoint was written.
    pub step: u64,
    pub params: Vec<ParamEntry>,
    /// Training configuration, kept opaque here so resumption can restore it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vocab,
    entities: Vocab,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: SegModel,
    pub word_vocab: Vocab,
    pub entity_vocab: Vocab,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    model: &SegModel,
    relations: &[String],
    word_vocab: &Vocab,
    entity_vocab: &Vocab,
    step: u64,
    train: Option<serde_json::Value>,
) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| SegError::io(dir, e))?;
    let manifest = CheckpointManifest {
        format_version: VERSION,
        model: model.config().clone(),
        relations: relations.to_vec(),
        vocab_fingerprint: vocab_fingerprint(word_vocab, relations),
        step,
        params: model
            .params()
            .iter()
            .map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
        train,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    write_json(
        &dir.join(VOCAB),
        &VocabFile { words: word_vocab.clone(), entities: entity_vocab.clone() },
    )?;
    write_params(&dir.join(PARAMS), model.params())?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(SegError::Checkpoint(format!("{} is not a checkpoint directory", dir.display())));
    }
    let manifest: CheckpointManifest = read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != VERSION {
        return Err(SegError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let vocab: VocabFile = read_json(&dir.join(VOCAB))?;
    let fingerprint = vocab_fingerprint(&vocab.words, &manifest.relations);
    if fingerprint != manifest.vocab_fingerprint {
        return Err(SegError::VocabMismatch {
            expected: manifest.vocab_fingerprint.clone(),
            found: fingerprint,
        });
    }
    let params = read_params(&dir.join(PARAMS))?;
    let listed: Vec<ParamEntry> = params
        .iter()
        .map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
        .collect();
    if listed != manifest.params {
        return Err(SegError::Checkpoint("params.bin does not match the manifest registry".into()));
    }
    let model = SegModel::with_params(manifest.model.clone(), params)?;
    Ok(Checkpoint { manifest, model, word_vocab: vocab.words, entity_vocab: vocab.entities })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| SegError::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| SegError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = fs::File::open(path).map_err(|e| SegError::io(path, e))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| SegError::Checkpoint(format!("{}: {e}", path.display())))
}

fn write_params(path: &Path, params: &ParamStore) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| SegError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| SegError::io(path, e));
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        put(&(p.name.len() as u32).to_le_bytes())?;
        put(p.name.as_bytes())?;
        put(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            put(&(d as u64).to_le_bytes())?;
        }
        for &x in p.value.data() {
            put(&x.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| SegError::io(path, e))
}

fn read_params(path: &Path) -> Result<ParamStore> {
    let f = fs::File::open(path).map_err(|e| SegError::io(path, e))?;
    let mut r = BufReader::new(f);
    let corrupt = |what: &str| SegError::Checkpoint(format!("{}: {what}", path.display()));
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        r.read_exact(&mut buf).map_err(|_| corrupt("truncated"))?;
        Ok(buf)
    };
    if take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    if u32_at(take(4)?) != VERSION {
        return Err(corrupt("unsupported version"));
    }
    let count = u32_at(take(4)?) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(name_len)?).map_err(|_| corrupt("name is not utf-8"))?;
        let ndim = u32_at(take(4)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let n: usize = shape.iter().product();
        let data = take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.find(&name).is_some() {
            return Err(corrupt("duplicate parameter name"));
        }
        store.add(name, Tensor::new(shape, data)?);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| SegError::io(path, e))?;
    if !rest.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(store)
}
