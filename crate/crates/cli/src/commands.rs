use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::{info, warn};
use seg_core::data::{
    filter_one_sentence, generate_synthetic, load_jsonl, vocab_fingerprint, write_jsonl, Dataset, LoadOptions, Vocab,
};
use seg_core::embedding::load_pretrained;
use seg_core::evaluation::{evaluate, write_pr_csv, write_report, EvalOptions, EvalReport, SubsampleMode, DEFAULT_TOP_N};
use seg_core::model::{check_gradients, gradcheck_bags, load_checkpoint, ModelConfig, SegModel, Variant};
use seg_core::numerics::GradCheckConfig;
use seg_core::parallel::Exec;
use seg_core::training::{checkpoint_path, train as run_training, write_history_csv, TrainConfig};
use seg_core::SegError;

use crate::args::{require_file, AblateArgs, DataArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs};
use crate::manifest::RunManifest;
use crate::Invalid;

pub struct Env {
    pub threads: usize,
    pub exec: Exec,
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| SegError::io(path, e))?;
    Ok(())
}

fn load_train(path: &Path, data: &DataArgs) -> anyhow::Result<Dataset> {
    require_file(path, "training file")?;
    let opts = LoadOptions { max_len: data.max_len, bag_cap: data.bag_cap, ..LoadOptions::default() };
    let loaded = load_jsonl(path, &opts)?;
    info!("{}: {} bags, {:?}", path.display(), loaded.dataset.bags.len(), loaded.stats);
    Ok(loaded.dataset)
}

/// Loads held-out data against a frozen vocabulary and relation table.
fn load_frozen(path: &Path, data: &DataArgs, words: &Vocab, relations: &[String]) -> anyhow::Result<Dataset> {
    require_file(path, "test file")?;
    let opts = LoadOptions {
        max_len: data.max_len,
        bag_cap: data.bag_cap,
        relations: relations.to_vec(),
        word_vocab: Some(words.clone()),
    };
    let loaded = load_jsonl(path, &opts)?;
    info!("{}: {} bags, {:?}", path.display(), loaded.dataset.bags.len(), loaded.stats);
    Ok(loaded.dataset)
}

fn fit_to_data(cfg: &mut ModelConfig, ds: &Dataset) {
    cfg.vocab_size = ds.word_vocab.len();
    cfg.num_relations = ds.num_relations();
}

pub fn synth(a: &SynthArgs, env: &Env) -> anyhow::Result<()> {
    let spec = a.resolve()?;
    let train = a.out.join("train.jsonl");
    let test = a.out.join("test.jsonl");
    let noise = a.out.join("noise_manifest.json");

    let mut m = RunManifest::new("synth", env.threads, env.exec);
    m.config_path("synth", a.config.as_ref());
    m.data_seed = Some(spec.seed);
    m.synth = Some(spec.clone());
    m.output("train", train.clone());
    m.output("test", test.clone());
    m.output("noise_manifest", noise.clone());
    m.write(&a.out)?;

    let data = generate_synthetic(&spec)?;
    write_jsonl(&data.train, &train)?;
    write_jsonl(&data.test, &test)?;
    write_text(&noise, &(serde_json::to_string_pretty(&data.manifest)? + "\n"))?;
    let noisy = data.manifest.train_noisy.iter().filter(|&&n| n).count();
    info!(
        "wrote {} train bags ({noisy} noisy) and {} test bags to {}",
        data.train.bags.len(),
        data.test.bags.len(),
        a.out.display()
    );
    Ok(())
}

pub fn train(a: &TrainArgs, env: &Env) -> anyhow::Result<()> {
    let ds = load_train(&a.train, &a.data)?;
    let eval = match &a.test {
        Some(p) => Some(load_frozen(p, &a.data, &ds.word_vocab, &ds.relation_names)?),
        None => None,
    };
    let ckpt_dir = a.out.join("checkpoints");

    let (mut model, mut cfg, start) = match &a.resume {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Invalid(format!("checkpoint {} does not exist", dir.display())).into());
            }
            if a.model.model_config.is_some() || a.model.variant.is_some() || a.pretrained.is_some() {
                warn!("model options are ignored when resuming; the checkpoint defines the model");
            }
            let ck = load_checkpoint(dir)?;
            let found = vocab_fingerprint(&ds.word_vocab, &ds.relation_names);
            if found != ck.manifest.vocab_fingerprint {
                return Err(SegError::VocabMismatch { expected: ck.manifest.vocab_fingerprint, found }.into());
            }
            let stored = ck
                .manifest
                .train
                .clone()
                .ok_or_else(|| SegError::Checkpoint("checkpoint has no training configuration".into()))?;
            let mut cfg: TrainConfig = serde_json::from_value(stored)?;
            a.training.apply(&mut cfg);
            if cfg.max_steps <= ck.manifest.step {
                return Err(Invalid(format!(
                    "checkpoint is already at step {}; raise --max-steps to continue",
                    ck.manifest.step
                ))
                .into());
            }
            (ck.model, cfg, ck.manifest.step)
        }
        None => {
            let mut mc = a.model.resolve()?;
            fit_to_data(&mut mc, &ds);
            mc.validate()?;
            (SegModel::new(mc)?, a.training.resolve()?, 0)
        }
    };
    cfg.exec = env.exec;
    cfg.checkpoint_dir = Some(ckpt_dir.clone());
    cfg.validate()?;

    let history = a.out.join("history.csv");
    let mut m = RunManifest::new("train", env.threads, env.exec);
    m.config_path("model", a.model.model_config.as_ref());
    m.config_path("train", a.training.train_config.as_ref());
    m.config_path("train_data", Some(&a.train));
    m.config_path("test_data", a.test.as_ref());
    m.config_path("resume", a.resume.as_ref());
    m.config_path("pretrained", a.pretrained.as_ref());
    m.data_seed = Some(cfg.seed);
    m.model_seed = Some(model.config().seed);
    m.model = Some(model.config().clone());
    m.train = Some(cfg.clone());
    m.extra = serde_json::json!({ "start_step": start });
    m.output("history", history.clone());
    m.output("checkpoints", ckpt_dir.clone());
    m.output("final_checkpoint", checkpoint_path(&ckpt_dir, cfg.max_steps));
    m.write(&a.out)?;

    if let (Some(p), None) = (&a.pretrained, &a.resume) {
        require_file(p, "pretrained vectors")?;
        let id = model.params().find("embedding.word").context("model has no word embedding")?;
        let n = load_pretrained(p, &ds.word_vocab, model.params_mut().get_mut(id))?;
        info!("initialised {n} of {} word vectors from {}", ds.word_vocab.len(), p.display());
    }

    info!(
        "training {} from step {start} to {} ({} bags, batch {})",
        model.config().variant.name(),
        cfg.max_steps,
        ds.bags.len(),
        cfg.batch_size
    );
    let outcome = run_training(model, &ds, eval.as_ref(), &cfg, start)?;
    write_history_csv(&outcome.history, &history)?;
    if let Some(last) = outcome.history.last() {
        info!("step {}: loss {:.4}, lr {}", last.step, last.loss, last.lr);
    }
    if let Some(p) = outcome.checkpoints.last() {
        info!("final checkpoint {}", p.display());
    }
    Ok(())
}

fn summarize(report: &EvalReport) -> String {
    let mut s = format!(
        "AUC {:.4}  non-NA accuracy {:.4}  ({} bags, {} gold facts)\n",
        report.auc, report.non_na_accuracy, report.num_bags, report.total_gold_positives
    );
    for row in &report.p_at_n {
        let cells: Vec<String> = row.values.iter().map(|v| format!("P@{} {}", v.n, fmt_opt(v.precision))).collect();
        let _ = writeln!(s, "{:<4} {}  mean {}", mode_label(row.mode), cells.join("  "), fmt_opt(row.mean));
    }
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

fn mode_label(mode: SubsampleMode) -> &'static str {
    match mode {
        SubsampleMode::One => "One",
        SubsampleMode::Two => "Two",
        SubsampleMode::All => "All",
    }
}

pub fn eval(a: &EvalArgs, env: &Env) -> anyhow::Result<()> {
    if !a.checkpoint.is_dir() {
        return Err(Invalid(format!("checkpoint {} does not exist", a.checkpoint.display())).into());
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let report_path = a.out.join("report.json");
    let pr_path = a.out.join("pr_curve.csv");

    let mut m = RunManifest::new("eval", env.threads, env.exec);
    m.config_path("checkpoint", Some(&a.checkpoint));
    m.config_path("test_data", Some(&a.test));
    m.data_seed = Some(a.data_seed);
    m.model_seed = Some(ck.model.config().seed);
    m.model = Some(ck.model.config().clone());
    m.extra = serde_json::json!({ "one_sentence_only": a.one_sentence_only, "checkpoint_step": ck.manifest.step });
    m.output("report", report_path.clone());
    m.output("pr_curve", pr_path.clone());
    m.write(&a.out)?;

    let mut ds = load_frozen(&a.test, &a.data, &ck.word_vocab, &ck.manifest.relations)?;
    let found = vocab_fingerprint(&ds.word_vocab, &ds.relation_names);
    if found != ck.manifest.vocab_fingerprint {
        return Err(SegError::VocabMismatch { expected: ck.manifest.vocab_fingerprint, found }.into());
    }
    if a.one_sentence_only {
        ds = filter_one_sentence(&ds);
        info!("{} single-sentence bags", ds.bags.len());
    }
    let opts = EvalOptions { subsample_seed: a.data_seed, top_n: DEFAULT_TOP_N.to_vec(), exec: env.exec };
    let report = evaluate(&ck.model, &ds, &opts)?;
    write_report(&report, &report_path)?;
    write_pr_csv(&report.pr_points, &pr_path)?;
    print!("{}", summarize(&report));
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs, env: &Env) -> anyhow::Result<()> {
    if let Some(d) = a.dropout.filter(|&d| d != 0.0) {
        return Err(Invalid(format!(
            "dropout {d} makes the objective stochastic; gradient checks run with dropout 0"
        ))
        .into());
    }
    let base: Option<ModelConfig> = match &a.model_config {
        Some(p) => Some(crate::args::read_json(p)?),
        None => None,
    };
    let variants = if a.variant.is_empty() { Variant::ALL.to_vec() } else { a.variant.clone() };
    let configs: Vec<ModelConfig> = variants
        .iter()
        .map(|&v| {
            let mut c = base.clone().map_or_else(|| ModelConfig::tiny(v), |b| ModelConfig { variant: v, ..b });
            c.scalar_gate |= a.scalar_gate;
            c.dropout = 0.0;
            c.validate().map(|_| c)
        })
        .collect::<Result<_, _>>()?;
    let check = GradCheckConfig { eps: a.eps, tol: a.tol, ..GradCheckConfig::default() };

    let fault_in: Vec<bool> = match &a.plant_fault {
        Some(name) => {
            let hits = configs
                .iter()
                .map(|c| Ok(SegModel::new(c.clone())?.params().find(name).is_some()))
                .collect::<anyhow::Result<Vec<bool>>>()?;
            if !hits.iter().any(|&h| h) {
                return Err(Invalid(format!("no checked variant has a parameter named {name:?}")).into());
            }
            hits
        }
        None => vec![false; configs.len()],
    };

    let out_json = a.out.join("gradcheck.json");
    let mut m = RunManifest::new("gradcheck", env.threads, env.exec);
    m.config_path("model", a.model_config.as_ref());
    m.data_seed = Some(a.seed);
    m.extra = serde_json::json!({
        "variants": variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
        "check": check,
        "plant_fault": a.plant_fault,
    });
    m.output("report", out_json.clone());
    m.write(&a.out)?;

    let mut reports = serde_json::Map::new();
    let mut failed = Vec::new();
    println!("{:<22} {:>6} {:>12}  {:<28} status", "variant", "params", "max rel err", "worst parameter");
    for ((cfg, v), fault) in configs.iter().zip(&variants).zip(&fault_in) {
        let bags = gradcheck_bags(cfg, a.seed);
        let plant = a.plant_fault.as_deref().filter(|_| *fault);
        let report = check_gradients(cfg, &bags, &check, plant)?;
        let worst = report
            .params
            .iter()
            .max_by(|x, y| x.max_rel_error.total_cmp(&y.max_rel_error))
            .map_or("-", |p| p.name.as_str());
        let ok = report.passed();
        println!(
            "{:<22} {:>6} {:>12.3e}  {:<28} {}",
            v.name(),
            report.params.len(),
            report.max_rel_error(),
            worst,
            if ok { "PASS" } else { "FAIL" }
        );
        for f in report.failures() {
            println!("    {} [{}]: analytic {:.6e}, numeric {:.6e}", f.name, f.worst_index, f.analytic, f.numeric);
        }
        if !ok {
            failed.push(v.name());
        }
        reports.insert(v.name().to_string(), serde_json::to_value(&report)?);
    }
    write_text(&out_json, &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    if !failed.is_empty() {
        return Err(Invalid(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn ablate(a: &AblateArgs, env: &Env) -> anyhow::Result<()> {
    let ds = load_train(&a.train, &a.data)?;
    let test = load_frozen(&a.test, &a.data, &ds.word_vocab, &ds.relation_names)?;
    let mut base = a.model.resolve()?;
    fit_to_data(&mut base, &ds);
    let mut cfg = a.training.resolve()?;
    cfg.exec = env.exec;

    let variants = if a.variants.is_empty() { Variant::ALL.to_vec() } else { a.variants.clone() };
    let configs: Vec<ModelConfig> = variants
        .iter()
        .map(|&v| {
            let c = ModelConfig { variant: v, ..base.clone() };
            c.validate().map(|_| c)
        })
        .collect::<Result<_, _>>()?;

    let table = a.out.join("ablation.csv");
    let mut m = RunManifest::new("ablate", env.threads, env.exec);
    m.config_path("model", a.model.model_config.as_ref());
    m.config_path("train", a.training.train_config.as_ref());
    m.config_path("train_data", Some(&a.train));
    m.config_path("test_data", Some(&a.test));
    m.data_seed = Some(cfg.seed);
    m.model_seed = Some(base.seed);
    m.model = Some(base.clone());
    m.train = Some(cfg.clone());
    m.extra = serde_json::json!({ "variants": variants.iter().map(|v| v.name()).collect::<Vec<_>>() });
    m.output("table", table.clone());
    for v in &variants {
        m.output(v.name(), a.out.join(v.name()));
    }
    m.write(&a.out)?;

    let mut header = String::from("variant,label,auc,non_na_accuracy");
    for mode in SubsampleMode::ALL {
        let tag = mode_label(mode).to_lowercase();
        for n in DEFAULT_TOP_N {
            let _ = write!(header, ",{tag}_p{n}");
        }
        let _ = write!(header, ",{tag}_mean");
    }
    let mut csv = header + "\n";
    let opts = EvalOptions { subsample_seed: cfg.seed, top_n: DEFAULT_TOP_N.to_vec(), exec: env.exec };

    for mc in configs {
        let name = mc.variant.name();
        let dir: PathBuf = a.out.join(name);
        let run_cfg = TrainConfig { checkpoint_dir: Some(dir.join("checkpoints")), ..cfg.clone() };
        info!("ablation: training {name}");
        let outcome = run_training(SegModel::new(mc.clone())?, &ds, Some(&test), &run_cfg, 0)?;
        write_history_csv(&outcome.history, dir.join("history.csv"))?;
        let report = evaluate(&outcome.model, &test, &opts)?;
        write_report(&report, dir.join("report.json"))?;
        write_pr_csv(&report.pr_points, dir.join("pr_curve.csv"))?;

        let _ = write!(csv, "{name},{},{},{}", mc.variant.row_label(), report.auc, report.non_na_accuracy);
        for row in &report.p_at_n {
            for v in &row.values {
                let _ = write!(csv, ",{}", csv_opt(v.precision));
            }
            let _ = write!(csv, ",{}", csv_opt(row.mean));
        }
        csv.push('\n');
        println!("{:<22} {}", mc.variant.row_label(), summarize(&report).lines().next().unwrap_or(""));
    }
    write_text(&table, &csv)?;
    info!("wrote {}", table.display());
    Ok(())
}
