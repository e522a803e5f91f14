//! Held-out evaluation: ranked relation decisions, PR curve and AUC, P@N
//! under one/two/all sentence subsampling, and non-NA accuracy.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{vocab_fingerprint, Dataset, NA};
use crate::error::{Result, SegError};
use crate::model::{BagPrediction, SegModel};
use crate::parallel::Exec;
use crate::seeds;

pub const AUC_CONVENTION: &str =
    "trapezoid over the full recall range, starting at (recall 0, precision at rank 1)";
pub const SUBSAMPLE_PROTOCOL: &str =
    "one/two/all applied to test bags with at least two sentences; sentences drawn without replacement";
pub const DEFAULT_TOP_N: [usize; 3] = [100, 200, 300];

/// One candidate fact: bag `bag` holds relation `relation` with confidence
/// `score`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDecision {
    pub bag: usize,
    pub relation: usize,
    pub score: f64,
    pub correct: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn predict_all(model: &SegModel, ds: &Dataset, exec: Exec) -> Result<Vec<BagPrediction>> {
    exec.map(&ds.bags, |_, bag| model.predict(bag)).into_iter().collect()
}

/// Every non-NA relation of every bag becomes a decision scored by its
/// predicted probability.
pub fn score_decisions(ds: &Dataset, preds: &[BagPrediction]) -> Vec<ScoredDecision> {
    ds.bags
        .iter()
        .zip(preds)
        .enumerate()
        .flat_map(|(i, (bag, pred))| {
            (0..pred.probs.len()).filter(|&r| r != NA).map(move |r| ScoredDecision {
                bag: i,
                relation: r,
                score: pred.probs[r],
                correct: bag.label == r,
            })
        })
        .collect()
}

/// Descending score; ties by bag id, then relation id.
pub fn rank_decisions(decisions: &mut [ScoredDecision]) {
    decisions.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.bag.cmp(&b.bag))
            .then(a.relation.cmp(&b.relation))
    });
}

/// Number of non-NA gold facts, one per bag labelled with a relation.
pub fn total_gold_positives(ds: &Dataset) -> usize {
    ds.bags.iter().filter(|b| b.label != NA).count()
}

pub fn pr_curve_and_auc(
    decisions: &[ScoredDecision],
    total_gold_positives: usize,
) -> Result<(Vec<PrPoint>, f64)> {
    if total_gold_positives == 0 {
        return Err(SegError::Data("recall is undefined with no gold positives".into()));
    }
    if decisions.is_empty() {
        return Err(SegError::Data("no decisions to rank".into()));
    }
    let mut ranked = decisions.to_vec();
    rank_decisions(&mut ranked);
    let mut points = Vec::with_capacity(ranked.len());
    let mut hits = 0usize;
    for (k, d) in ranked.iter().enumerate() {
        hits += usize::from(d.correct);
        points.push(PrPoint {
            score: d.score,
            precision: hits as f64 / (k + 1) as f64,
            recall: hits as f64 / total_gold_positives as f64,
        });
    }
    let mut auc = 0.0;
    let (mut r0, mut p0) = (0.0, points[0].precision);
    for p in &points {
        auc += (p.recall - r0) * (p.precision + p0) / 2.0;
        (r0, p0) = (p.recall, p.precision);
    }
    Ok((points, auc))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAtN {
    pub n: usize,
    /// `None` when there are no decisions at all.
    pub precision: Option<f64>,
    pub available: usize,
    /// Set when fewer than `n` decisions existed.
    pub short: bool,
}

/// Precision among the `n` highest-ranked decisions.
pub fn precision_at_n(decisions: &[ScoredDecision], n: usize) -> PrecisionAtN {
    let mut ranked = decisions.to_vec();
    rank_decisions(&mut ranked);
    let top = &ranked[..n.min(ranked.len())];
    let precision = (!top.is_empty())
        .then(|| top.iter().filter(|d| d.correct).count() as f64 / top.len() as f64);
    PrecisionAtN { n, precision, available: top.len(), short: ranked.len() < n }
}

/// Arithmetic mean of the defined entries.
pub fn p_at_n_mean(values: &[PrecisionAtN]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().filter_map(|v| v.precision).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsampleMode {
    One,
    Two,
    All,
}

impl SubsampleMode {
    pub const ALL: [SubsampleMode; 3] = [SubsampleMode::One, SubsampleMode::Two, SubsampleMode::All];

    fn keep(self) -> Option<usize> {
        match self {
            SubsampleMode::One => Some(1),
            SubsampleMode::Two => Some(2),
            SubsampleMode::All => None,
        }
    }
}

/// Restricts to bags with at least two sentences, then keeps one, two or
/// all sentences per bag. Retained sentences keep their original order.
pub fn subsample_bags(ds: &Dataset, mode: SubsampleMode, seed: u64) -> Dataset {
    let bags = ds
        .bags
        .iter()
        .enumerate()
        .filter(|(_, b)| b.len() >= 2)
        .map(|(i, b)| {
            let mut bag = b.clone();
            if let Some(k) = mode.keep() {
                let mut rng = seeds::rng(seed, &[i as u64]);
                let mut picked = sample(&mut rng, b.len(), k).into_vec();
                picked.sort_unstable();
                bag.sentences = picked.into_iter().map(|j| b.sentences[j].clone()).collect();
            }
            bag
        })
        .collect();
    ds.with_bags(bags)
}

/// Fraction of non-NA gold bags whose argmax prediction is the gold label.
pub fn non_na_accuracy(ds: &Dataset, preds: &[BagPrediction]) -> Result<f64> {
    let (mut total, mut hits) = (0usize, 0usize);
    for (bag, pred) in ds.bags.iter().zip(preds) {
        if bag.label != NA {
            total += 1;
            hits += usize::from(pred.predicted == bag.label);
        }
    }
    if total == 0 {
        return Err(SegError::Data("non-NA accuracy is undefined without non-NA bags".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Fraction of all bags whose argmax prediction is the gold label.
pub fn accuracy(ds: &Dataset, preds: &[BagPrediction]) -> f64 {
    if ds.bags.is_empty() {
        return 0.0;
    }
    let hits = ds.bags.iter().zip(preds).filter(|(b, p)| p.predicted == b.label).count();
    hits as f64 / ds.bags.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PAtNRow {
    pub mode: SubsampleMode,
    pub bags: usize,
    pub values: Vec<PrecisionAtN>,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSeeds {
    pub model: u64,
    pub subsample: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub vocab_fingerprint: String,
    pub seeds: EvalSeeds,
    pub auc_convention: String,
    pub subsample_protocol: String,
    pub num_bags: usize,
    pub num_decisions: usize,
    pub total_gold_positives: usize,
    pub auc: f64,
    pub non_na_accuracy: f64,
    pub p_at_n: Vec<PAtNRow>,
    pub pr_points: Vec<PrPoint>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub subsample_seed: u64,
    pub top_n: Vec<usize>,
    pub exec: Exec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { subsample_seed: 0, top_n: DEFAULT_TOP_N.to_vec(), exec: Exec::default() }
    }
}

/// AUC and non-NA accuracy only; cheaper than a full report.
pub fn quick_metrics(model: &SegModel, ds: &Dataset, exec: Exec) -> Result<(f64, f64)> {
    let preds = predict_all(model, ds, exec)?;
    let decisions = score_decisions(ds, &preds);
    let (_, auc) = pr_curve_and_auc(&decisions, total_gold_positives(ds))?;
    Ok((auc, non_na_accuracy(ds, &preds)?))
}

pub fn evaluate(model: &SegModel, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let preds = predict_all(model, ds, opts.exec)?;
    let decisions = score_decisions(ds, &preds);
    let gold = total_gold_positives(ds);
    let (pr_points, auc) = pr_curve_and_auc(&decisions, gold)?;
    let non_na = non_na_accuracy(ds, &preds)?;

    let mut p_at_n = Vec::new();
    for mode in SubsampleMode::ALL {
        let sub = subsample_bags(ds, mode, opts.subsample_seed);
        let sub_preds = predict_all(model, &sub, opts.exec)?;
        let sub_decisions = score_decisions(&sub, &sub_preds);
        let values: Vec<_> = opts.top_n.iter().map(|&n| precision_at_n(&sub_decisions, n)).collect();
        if values.iter().any(|v| v.short) {
            log::warn!(
                "P@N for mode {mode:?}: only {} decisions available",
                sub_decisions.len()
            );
        }
        p_at_n.push(PAtNRow { mode, bags: sub.bags.len(), mean: p_at_n_mean(&values), values });
    }

    Ok(EvalReport {
        variant: model.config().variant.name().to_string(),
        vocab_fingerprint: vocab_fingerprint(&ds.word_vocab, &ds.relation_names),
        seeds: EvalSeeds { model: model.config().seed, subsample: opts.subsample_seed },
        auc_convention: AUC_CONVENTION.into(),
        subsample_protocol: SUBSAMPLE_PROTOCOL.into(),
        num_bags: ds.bags.len(),
        num_decisions: decisions.len(),
        total_gold_positives: gold,
        auc,
        non_na_accuracy: non_na,
        p_at_n,
        pr_points,
    })
}

pub fn write_pr_csv(points: &[PrPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| SegError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| SegError::io(path, e);
    writeln!(w, "score,precision,recall").map_err(io)?;
    for p in points {
        writeln!(w, "{},{},{}", p.score, p.precision, p.recall).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| SegError::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| SegError::io(path, e))
}

/// Exhaustive re-computation of the PR curve and AUC, used as an oracle.
#[doc(hidden)]
pub fn brute_force_auc(decisions: &[ScoredDecision], total_gold_positives: usize) -> f64 {
    // a decision precedes another iff it has a higher score, or an equal
    // score and a smaller (bag, relation) key
    let before = |a: &ScoredDecision, b: &ScoredDecision| match a.score.partial_cmp(&b.score) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) => false,
        _ => (a.bag, a.relation) < (b.bag, b.relation),
    };
    let n = decisions.len();
    let mut curve = vec![(0.0, 0.0); n];
    for d in decisions {
        let rank = decisions.iter().filter(|o| before(o, d)).count();
        let top: Vec<_> = decisions.iter().filter(|o| before(o, d) || *o == d).collect();
        let hits = top.iter().filter(|o| o.correct).count() as f64;
        curve[rank] = (hits / total_gold_positives as f64, hits / top.len() as f64);
    }
    let mut area = 0.0;
    let mut prev = (0.0, curve[0].1);
    for &(r, p) in &curve {
        area += (r - prev.0) * (p + prev.1) * 0.5;
        prev = (r, p);
    }
    area
}
