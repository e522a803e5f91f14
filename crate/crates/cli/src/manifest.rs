use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;
use seg_core::data::SynthSpec;
use seg_core::model::ModelConfig;
use seg_core::parallel::Exec;
use seg_core::training::TrainConfig;
use seg_core::SegError;

pub const FILE: &str = "run_manifest.json";

/// Everything needed to rerun a command, written before any work starts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub git_describe: String,
    pub threads: usize,
    pub exec: Exec,
    pub config_paths: BTreeMap<String, PathBuf>,
    pub data_seed: Option<u64>,
    pub model_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
    pub outputs: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, threads: usize, exec: Exec) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            git_describe: git_describe(),
            threads,
            exec,
            config_paths: BTreeMap::new(),
            data_seed: None,
            model_seed: None,
            synth: None,
            model: None,
            train: None,
            extra: serde_json::Value::Null,
            outputs: BTreeMap::new(),
        }
    }

    pub fn config_path(&mut self, key: &str, path: Option<&PathBuf>) {
        if let Some(p) = path {
            self.config_paths.insert(key.to_string(), p.clone());
        }
    }

    pub fn output(&mut self, key: &str, path: PathBuf) {
        self.outputs.insert(key.to_string(), path);
    }

    pub fn write(&self, dir: &Path) -> seg_core::Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| SegError::io(dir, e))?;
        let path = dir.join(FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| SegError::io(&path, e))?;
        Ok(path)
    }
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}
