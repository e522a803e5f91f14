//! Minibatch SGD with step-decayed learning rate, seeded epoch shuffles,
//! periodic evaluation and checkpointing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{vocab_fingerprint, Dataset};
use crate::error::{Result, SegError};
use crate::evaluation;
use crate::model::{load_checkpoint, save_checkpoint, Mode, SegModel};
use crate::numerics::global_norm;
use crate::parallel::Exec;
use crate::seeds;

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
    pub max_steps: u64,
    /// Bags per step.
    pub batch_size: usize,
    /// Evaluation and checkpoint interval in steps; 0 disables both until
    /// the final step.
    pub eval_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Drives the epoch shuffles.
    pub seed: u64,
    /// Global-norm gradient clip.
    pub clip_norm: Option<f64>,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            decay_every: 100_000,
            decay_factor: 0.1,
            max_steps: 3000,
            batch_size: 32,
            eval_every: 500,
            checkpoint_dir: None,
            seed: 0,
            clip_norm: None,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SegError::Config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive and finite");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad("clip_norm must be positive and finite");
            }
        }
        Ok(())
    }
}

/// `lr0 · decay_factor^floor(step / decay_every)`
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let k = step / cfg.decay_every;
    cfg.lr0 * cfg.decay_factor.powi(k.min(i32::MAX as u64) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// 1-based index of the completed step.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Training-mode accuracy on this step's batch.
    pub train_acc: f64,
    pub eval_auc: Option<f64>,
}

pub fn write_history_csv(rows: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| SegError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| SegError::io(path, e);
    writeln!(w, "step,loss,lr,train_acc,eval_auc").map_err(io)?;
    for r in rows {
        let auc = r.eval_auc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{}", r.step, r.loss, r.lr, r.train_acc, auc).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SegModel,
    pub history: Vec<HistoryRow>,
    /// Total steps completed, including any before a resume.
    pub steps: u64,
    pub checkpoints: Vec<PathBuf>,
}

/// Infinite stream of bag indices: a fresh seeded permutation per epoch.
struct BatchStream {
    seed: u64,
    n: usize,
    epoch: u64,
    perm: Vec<usize>,
}

impl BatchStream {
    fn new(seed: u64, n: usize) -> Self {
        let mut s = Self { seed, n, epoch: u64::MAX, perm: Vec::new() };
        s.load(0);
        s
    }

    fn load(&mut self, epoch: u64) {
        if epoch != self.epoch {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut seeds::rng(self.seed, &[SHUFFLE_STREAM, epoch]));
            self.epoch = epoch;
        }
    }

    /// Indices for the batch taken at `step`, a pure function of the step.
    fn batch(&mut self, step: u64, size: usize) -> Vec<usize> {
        let start = step * size as u64;
        (start..start + size as u64)
            .map(|pos| {
                self.load(pos / self.n as u64);
                self.perm[(pos % self.n as u64) as usize]
            })
            .collect()
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}"))
}

/// The checkpoint with the highest step count under `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| SegError::io(dir, e))?;
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| SegError::io(dir, e))?;
        let name = entry.file_name();
        let Some(step) = name.to_str().and_then(|s| s.strip_prefix("step-")).and_then(|s| s.parse().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Trains `model` from `start_step` (0 for a fresh run) up to
/// `cfg.max_steps`. Batches and dropout masks depend only on the seeds and
/// the step index, so a resumed run matches an uninterrupted one exactly.
pub fn train(
    mut model: SegModel,
    ds: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    start_step: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config().validate()?;
    if ds.bags.is_empty() {
        return Err(SegError::Data("training set has no bags".into()));
    }
    if ds.num_relations() != model.config().num_relations {
        return Err(SegError::Config(format!(
            "data has {} relations, model expects {}",
            ds.num_relations(),
            model.config().num_relations
        )));
    }
    let registry = model.params().len();
    let dropout = model.config().dropout > 0.0;
    let model_seed = model.config().seed;
    let mut stream = BatchStream::new(cfg.seed, ds.bags.len());
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let train_json = serde_json::to_value(cfg)?;

    for step in start_step..cfg.max_steps {
        let ids = stream.batch(step, cfg.batch_size);
        let bags: Vec<_> = ids.iter().map(|&i| &ds.bags[i]).collect();
        let mode = |j: usize| Mode::Train {
            dropout_seed: dropout.then(|| seeds::derive(model_seed, &[DROPOUT_STREAM, step, j as u64])),
        };
        let mut g = model.batch_gradient(&bags, mode, cfg.exec)?;
        let norm = global_norm(&g.grads);
        if !g.loss.is_finite() || !norm.is_finite() {
            return Err(SegError::NonFinite(format!(
                "loss {} (gradient norm {norm}) at step {} on bags {ids:?}",
                g.loss,
                step + 1
            )));
        }
        if let Some(c) = cfg.clip_norm {
            if norm > c {
                let k = c / norm;
                for t in &mut g.grads {
                    t.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        let lr = lr_at(step, cfg);
        model.params_mut().sgd_step(&g.grads, lr)?;
        debug_assert_eq!(model.params().len(), registry);

        let done = step + 1;
        let at_eval = (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.max_steps;
        let mut row = HistoryRow {
            step: done,
            loss: g.loss,
            lr,
            train_acc: g.correct as f64 / bags.len() as f64,
            eval_auc: None,
        };
        if at_eval {
            if let Some(test) = eval {
                let (auc, acc) = evaluation::quick_metrics(&model, test, cfg.exec)?;
                row.eval_auc = Some(auc);
                log::info!("step {done}: loss {:.5} lr {lr} eval auc {auc:.4} non-NA acc {acc:.4}", g.loss);
            } else {
                log::info!("step {done}: loss {:.5} lr {lr}", g.loss);
            }
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = checkpoint_path(dir, done);
                save_checkpoint(
                    &path,
                    &model,
                    &ds.relation_names,
                    &ds.word_vocab,
                    &ds.entity_vocab,
                    done,
                    Some(train_json.clone()),
                )?;
                checkpoints.push(path);
            }
        }
        history.push(row);
    }
    if model.params().len() != registry {
        return Err(SegError::Usage("parameter registry changed during training".into()));
    }
    Ok(TrainOutcome { model, history, steps: cfg.max_steps.max(start_step), checkpoints })
}

/// Continues training from a checkpoint written by [`train`]. The stored
/// training configuration is reused after `adjust` has had a chance to
/// change it (e.g. extend `max_steps` or redirect checkpoints).
pub fn resume(
    checkpoint: &Path,
    ds: &Dataset,
    eval: Option<&Dataset>,
    adjust: impl FnOnce(&mut TrainConfig),
) -> Result<TrainOutcome> {
    let ck = load_checkpoint(checkpoint)?;
    let found = vocab_fingerprint(&ds.word_vocab, &ds.relation_names);
    if found != ck.manifest.vocab_fingerprint {
        return Err(SegError::VocabMismatch { expected: ck.manifest.vocab_fingerprint, found });
    }
    let stored = ck
        .manifest
        .train
        .ok_or_else(|| SegError::Checkpoint("checkpoint has no training configuration".into()))?;
    let mut cfg: TrainConfig = serde_json::from_value(stored)?;
    adjust(&mut cfg);
    train(ck.model, ds, eval, &cfg, ck.manifest.step)
}
