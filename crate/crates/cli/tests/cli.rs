use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const DIMS: &[&str] = &["--d-w", "6", "--d-r", "2", "--d-c", "8", "--d-h", "18", "--d-cls", "16"];

fn seg(args: &[&str]) -> Output {
    seg_env(args, &[])
}

fn seg_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_seg"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("SEG_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn seg")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    let data = dir.join(format!("data-{seed}"));
    ok(&seg(&["synth", "--out", s(&data), "--seed", seed, "--num-bags", "120", "--num-test-bags", "60"]));
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let train = data.join("train.jsonl");
    let test = data.join("test.jsonl");
    let mut args = vec!["train", "--train", s(&train), "--test", s(&test), "--out", s(out)];
    args.extend_from_slice(DIMS);
    args.extend_from_slice(extra);
    seg(&args)
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let a = synth(dir.path(), "7");
    let b = dir.path().join("again");
    ok(&seg(&["synth", "--out", s(&b), "--seed", "7", "--num-bags", "120", "--num-test-bags", "60"]));
    for f in ["train.jsonl", "test.jsonl", "noise_manifest.json"] {
        assert_eq!(bytes(a.join(f)), bytes(b.join(f)), "{f}");
    }
    let c = synth(dir.path(), "8");
    assert_ne!(bytes(a.join("train.jsonl")), bytes(c.join("train.jsonl")));
    assert!(a.join("run_manifest.json").is_file());
}

#[test]
fn invalid_inputs_exit_with_validation_code() {
    let dir = TempDir::new().unwrap();
    let out = seg(&["synth", "--out", s(&dir.path().join("x")), "--noise-rate", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise_rate"));

    let test = dir.path().join("t.jsonl");
    fs::write(&test, "").unwrap();
    let out = seg(&["eval", "--checkpoint", s(&dir.path().join("missing")), "--test", s(&test), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(seg(&["train", "--bogus"]).status.code(), Some(1));

    let data = synth(dir.path(), "1");
    let (tr, r) = (data.join("train.jsonl"), dir.path().join("r"));
    let out = seg(&["train", "--train", s(&tr), "--out", s(&r), "--d-w", "6", "--d-h", "17", "--max-steps", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("d_h"));
}

#[test]
fn gradcheck_passes_and_catches_a_planted_fault() {
    let dir = TempDir::new().unwrap();
    let out = seg(&["gradcheck", "--out", s(&dir.path().join("ok"))]);
    ok(&out);
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.matches("PASS").count(), 8, "{table}");

    let out = seg(&["gradcheck", "--variant", "seg", "--plant-fault", "pcnn.w_c", "--out", s(&dir.path().join("bad"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));

    let out = seg(&["gradcheck", "--dropout", "0.5", "--out", s(&dir.path().join("drop"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_round_trip_and_manifest_rerun() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), "3");
    let run = dir.path().join("run");
    ok(&train(&data, &run, &["--max-steps", "30", "--eval-every", "15"]));
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 31);
    assert!(history.starts_with("step,loss,lr,train_acc,eval_auc"));

    let manifest: serde_json::Value = serde_json::from_slice(&bytes(run.join("run_manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["train"]["max_steps"], 30);
    let ckpt = run.join("checkpoints/step-00000030");
    assert_eq!(manifest["outputs"]["final_checkpoint"], s(&ckpt));

    let test = data.join("test.jsonl");
    let eval_out = dir.path().join("eval");
    let args = ["eval", "--checkpoint", s(&ckpt), "--test", s(&test), "--out", s(&eval_out)];
    ok(&seg(&args));
    let report: serde_json::Value = serde_json::from_slice(&bytes(eval_out.join("report.json"))).unwrap();
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(report["p_at_n"].as_array().unwrap().len(), 3);
    assert!(fs::read_to_string(eval_out.join("pr_curve.csv")).unwrap().starts_with("score,precision,recall"));

    // Rerunning the recorded argv reproduces the outputs bit for bit.
    let first = bytes(ckpt.join("params.bin"));
    let first_history = bytes(run.join("history.csv"));
    fs::remove_dir_all(&run).unwrap();
    let argv: Vec<String> =
        manifest["argv"].as_array().unwrap().iter().skip(1).map(|v| v.as_str().unwrap().to_string()).collect();
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    ok(&seg(&argv));
    assert_eq!(first, bytes(ckpt.join("params.bin")));
    assert_eq!(first_history, bytes(run.join("history.csv")));

    let eval_threads = dir.path().join("eval-threads");
    let args = ["eval", "--checkpoint", s(&ckpt), "--test", s(&test), "--out", s(&eval_threads)];
    ok(&seg_env(&args, &[("SEG_THREADS", "2")]));
    assert_eq!(bytes(eval_out.join("report.json")), bytes(eval_threads.join("report.json")));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), "5");
    let full = dir.path().join("full");
    ok(&train(&data, &full, &["--max-steps", "24", "--eval-every", "12"]));

    let half = dir.path().join("half");
    ok(&train(&data, &half, &["--max-steps", "12", "--eval-every", "12"]));
    let rest = dir.path().join("rest");
    let mid = half.join("checkpoints/step-00000012");
    ok(&train(&data, &rest, &["--resume", s(&mid), "--max-steps", "24"]));
    assert_eq!(
        bytes(full.join("checkpoints/step-00000024/params.bin")),
        bytes(rest.join("checkpoints/step-00000024/params.bin"))
    );

    let other = synth(dir.path(), "6");
    let out = train(&other, &dir.path().join("mismatch"), &["--resume", s(&mid), "--max-steps", "24"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary mismatch"));
}

#[test]
fn eval_rejects_unknown_relations() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), "2");
    let run = dir.path().join("run");
    ok(&train(&data, &run, &["--max-steps", "2", "--eval-every", "0"]));
    let test = dir.path().join("odd.jsonl");
    let line = r#"{"tokens":["a","b","c"],"head":{"text":"a","position":0},"tail":{"text":"c","position":2},"relation":"/never/seen"}"#;
    fs::write(&test, format!("{line}\n")).unwrap();
    let out = seg(&["eval", "--checkpoint", s(&run.join("checkpoints/step-00000002")), "--test", s(&test), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = TempDir::new().unwrap();
    let data = synth(dir.path(), "4");
    let out = dir.path().join("ablate");
    let (train, test) = (data.join("train.jsonl"), data.join("test.jsonl"));
    let mut args = vec!["ablate", "--train", s(&train), "--test", s(&test), "--out", s(&out)];
    args.extend_from_slice(DIMS);
    args.extend_from_slice(&["--variants", "seg,seg_wo_all", "--max-steps", "6", "--eval-every", "0"]);
    ok(&seg(&args));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("variant,label,auc,non_na_accuracy,one_p100"));
    assert!(rows[1].starts_with("seg,"));
    assert!(rows[2].starts_with("seg_wo_all,"));
    assert!(out.join("seg/report.json").is_file());
}
