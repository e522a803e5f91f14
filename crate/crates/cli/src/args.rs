use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use seg_core::data::{SynthSpec, DEFAULT_BAG_CAP, DEFAULT_MAX_LEN};
use seg_core::encoders::Activation;
use seg_core::model::{ModelConfig, Variant, DEFAULT_GRADCHECK_SEED};
use seg_core::training::TrainConfig;

use crate::Invalid;

fn parse_activation(s: &str) -> Result<Activation, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| format!("unknown activation {s:?}; expected relu, tanh or sigmoid"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())))?)
}

pub fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(Invalid(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    /// Output directory for train.jsonl, test.jsonl and noise_manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator settings; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub one_sentence_fraction: Option<f64>,
    #[arg(long)]
    pub num_relations: Option<usize>,
    #[arg(long)]
    pub num_entities: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub num_bags: Option<usize>,
    #[arg(long)]
    pub num_test_bags: Option<usize>,
    #[arg(long)]
    pub distractor_rate: Option<f64>,
}

impl SynthArgs {
    pub fn resolve(&self) -> anyhow::Result<SynthSpec> {
        let mut s: SynthSpec = match &self.config {
            Some(p) => read_json(p)?,
            None => SynthSpec::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { s.$f = v; })* };
        }
        set!(seed, noise_rate, one_sentence_fraction, num_relations, num_entities, vocab_size, num_bags, num_test_bags, distractor_rate);
        s.validate()?;
        Ok(s)
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// JSON model config; flags below override its fields.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Collapse the selective gate to one scalar per sentence.
    #[arg(long)]
    pub scalar_gate: bool,
    #[arg(long, value_parser = parse_activation)]
    pub activation: Option<Activation>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Seeds parameter init and dropout masks.
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub d_w: Option<usize>,
    #[arg(long)]
    pub d_r: Option<usize>,
    #[arg(long)]
    pub d_c: Option<usize>,
    #[arg(long)]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub d_cls: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub pos_clip: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
}

impl ModelArgs {
    /// Config file plus overrides. Vocabulary and relation counts are left
    /// for the caller to fill in from data.
    pub fn resolve(&self) -> anyhow::Result<ModelConfig> {
        let mut c: ModelConfig = match &self.model_config {
            Some(p) => read_json(p)?,
            None => ModelConfig::default(),
        };
        self.apply(&mut c);
        Ok(c)
    }

    pub fn apply(&self, c: &mut ModelConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(variant, activation, dropout, d_w, d_r, d_c, d_h, d_cls, window, pos_clip, lambda, l2);
        if let Some(s) = self.model_seed {
            c.seed = s;
        }
        if self.scalar_gate {
            c.scalar_gate = true;
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainingArgs {
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Seeds epoch shuffles and evaluation subsampling.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<u64>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    /// Evaluation and checkpoint interval; 0 keeps only the final step.
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

impl TrainingArgs {
    pub fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut c: TrainConfig = match &self.train_config {
            Some(p) => read_json(p)?,
            None => TrainConfig::default(),
        };
        self.apply(&mut c);
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(max_steps, batch_size, decay_every, decay_factor, eval_every);
        if let Some(v) = self.data_seed {
            c.seed = v;
        }
        if let Some(v) = self.lr {
            c.lr0 = v;
        }
        if self.clip_norm.is_some() {
            c.clip_norm = self.clip_norm;
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Maximum sentence length in tokens.
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    /// Maximum sentences kept per bag.
    #[arg(long, default_value_t = DEFAULT_BAG_CAP)]
    pub bag_cap: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Training JSONL; its vocabulary and relation table define the model.
    #[arg(long)]
    pub train: PathBuf,
    /// Held-out JSONL evaluated at each checkpoint.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint directory with its stored configs.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Whitespace-separated word vectors used to initialise word embeddings.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to bags holding a single sentence.
    #[arg(long)]
    pub one_sentence_only: bool,
    /// Seeds the One/Two/All sentence subsampling.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// Variants to check; all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    pub variant: Vec<Variant>,
    /// Base config; small built-in dimensions when omitted.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub scalar_gate: bool,
    /// Rejected when positive: the check needs a deterministic objective.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Seeds the random check batch.
    #[arg(long, default_value_t = DEFAULT_GRADCHECK_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value = "gradcheck-run")]
    pub out: PathBuf,
    /// Doubles the analytic gradient of this parameter.
    #[arg(long, hide = true)]
    pub plant_fault: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Variants to run, in table order; all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    pub data: DataArgs,
}
