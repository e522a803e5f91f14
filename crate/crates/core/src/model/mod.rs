//! Full bag classifier: embeddings, sentence encoders, bag aggregation and
//! an MLP head, wired according to one of eight architecture variants.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    concat_aggregate, gate_aggregate, gate_plus_attention_aggregate, gate_values, mean_aggregate,
    selective_attention_aggregate, SelectiveAttnParams, SelectiveGateParams,
};
use crate::data::{random_bag, Bag};
use crate::embedding::{
    embed_entity_concat, embed_positional, entity_aware_embed, EmbeddingTables,
    EntityAwareGateParams,
};
use crate::encoders::{
    pcnn_encode, self_attn_encode, stacked_encode, Activation, PcnnParams, SelfAttnParams,
};
use crate::error::{Result, SegError};
use crate::numerics::{
    grad_check, uniform, GradCheckConfig, GradCheckReport, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::parallel::Exec;
use crate::seeds;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, ParamEntry};

/// Floor applied inside the log of the gold-label probability.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Entity-aware embedding, parallel PCNN and self-attention, selective gate.
    #[default]
    Seg,
    SegWoEnt,
    /// Concatenates `[s; u]` and mean-pools instead of gating.
    SegWoGate,
    /// Mean of PCNN vectors only.
    SegWoGateWoAttn,
    /// PCNN with selective attention over positional embeddings.
    SegWoAll,
    SegAttnWoGate,
    /// Selective attention over gated sentence vectors.
    SegAttn,
    /// PCNN over self-attention reweighted tokens.
    SegStack,
}

impl Variant {
    /// Ablation table row order.
    pub const ALL: [Variant; 8] = [
        Variant::Seg,
        Variant::SegWoEnt,
        Variant::SegWoGate,
        Variant::SegWoGateWoAttn,
        Variant::SegWoAll,
        Variant::SegAttnWoGate,
        Variant::SegAttn,
        Variant::SegStack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Seg => "seg",
            Variant::SegWoEnt => "seg_wo_ent",
            Variant::SegWoGate => "seg_wo_gate",
            Variant::SegWoGateWoAttn => "seg_wo_gate_wo_attn",
            Variant::SegWoAll => "seg_wo_all",
            Variant::SegAttnWoGate => "seg_attn_wo_gate",
            Variant::SegAttn => "seg_attn",
            Variant::SegStack => "seg_stack",
        }
    }

    /// Short label used in ablation tables.
    pub fn row_label(self) -> &'static str {
        match self {
            Variant::Seg => "seg",
            other => other.name().trim_start_matches("seg_"),
        }
    }

    pub fn entity_aware(self) -> bool {
        !matches!(self, Variant::SegWoEnt | Variant::SegWoAll)
    }

    pub fn self_attention(self) -> bool {
        matches!(
            self,
            Variant::Seg | Variant::SegWoEnt | Variant::SegWoGate | Variant::SegAttn | Variant::SegStack
        )
    }

    pub fn selective_gate(self) -> bool {
        matches!(self, Variant::Seg | Variant::SegWoEnt | Variant::SegAttn | Variant::SegStack)
    }

    pub fn selective_attention(self) -> bool {
        matches!(self, Variant::SegWoAll | Variant::SegAttnWoGate | Variant::SegAttn)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.row_label() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                SegError::Config(format!("unknown variant {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Word vocabulary size; normally taken from the training data.
    pub vocab_size: usize,
    pub num_relations: usize,
    pub d_w: usize,
    pub d_r: usize,
    pub d_c: usize,
    pub d_h: usize,
    /// Convolution window, odd.
    pub window: usize,
    /// Relative positions are clipped to `[-pos_clip, pos_clip]`.
    pub pos_clip: usize,
    /// Smoothness of the entity-aware gate.
    pub lambda: f64,
    /// L2 coefficient over every parameter.
    pub l2: f64,
    pub dropout: f64,
    /// Hidden width of the classifier MLP.
    pub d_cls: usize,
    pub variant: Variant,
    pub scalar_gate: bool,
    pub activation: Activation,
    pub stack_residual: bool,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            num_relations: 53,
            d_w: 50,
            d_r: 5,
            d_c: 230,
            d_h: 150,
            window: 3,
            pos_clip: 30,
            lambda: 1.0,
            l2: 1e-5,
            dropout: 0.5,
            d_cls: 690,
            variant: Variant::Seg,
            scalar_gate: false,
            activation: Activation::Relu,
            stack_residual: false,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for gradient checks: `d_w=3, d_r=2, d_c=4, d_h=9`,
    /// five relations, dropout off.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            vocab_size: 12,
            num_relations: 5,
            d_w: 3,
            d_r: 2,
            d_c: 4,
            d_h: 9,
            pos_clip: 4,
            d_cls: 16,
            dropout: 0.0,
            l2: 1e-3,
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SegError::Config(msg));
        if self.variant.entity_aware() && self.d_h != 3 * self.d_w {
            return fail(format!(
                "d_h ({}) must equal 3·d_w ({}) when the entity-aware embedding is active (variant {})",
                self.d_h,
                3 * self.d_w,
                self.variant
            ));
        }
        if self.num_relations < 2 {
            return fail(format!("num_relations must be at least 2, got {}", self.num_relations));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.window.is_multiple_of(2) {
            return fail(format!("window must be odd, got {}", self.window));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_w", self.d_w),
            ("d_r", self.d_r),
            ("d_c", self.d_c),
            ("d_cls", self.d_cls),
            ("pos_clip", self.pos_clip),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.variant.entity_aware() && self.d_h == 0 {
            return fail("d_h must be positive".into());
        }
        if !(self.lambda.is_finite() && self.l2 >= 0.0 && self.l2.is_finite()) {
            return fail(format!("lambda ({}) and l2 ({}) must be finite, l2 nonnegative", self.lambda, self.l2));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return fail(format!("init_scale must be positive, got {}", self.init_scale));
        }
        Ok(())
    }

    pub fn d_p(&self) -> usize {
        self.d_w + 2 * self.d_r
    }

    /// Width of the token matrix fed to the encoders.
    pub fn encoder_dim(&self) -> usize {
        if self.variant.entity_aware() {
            self.d_h
        } else {
            self.d_p()
        }
    }

    pub fn sentence_dim(&self) -> usize {
        3 * self.d_c
    }

    /// Width of the bag vector `c` given to the classifier.
    pub fn bag_dim(&self) -> usize {
        match self.variant {
            Variant::SegWoGate => self.sentence_dim() + self.encoder_dim(),
            _ => self.sentence_dim(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierParams<H> {
    /// `[d_cls, dim(c)]`
    pub w_cls: H,
    pub b_cls: H,
    /// `[|C|, d_cls]`
    pub w_out: H,
    pub b_out: H,
}

/// Where each parameter group lives in the [`ParamStore`]. Groups a variant
/// does not use are absent.
#[derive(Clone, Debug)]
pub struct Layout {
    pub embedding: EmbeddingTables<ParamId>,
    pub entity_gate: Option<EntityAwareGateParams<ParamId>>,
    pub pcnn: PcnnParams<ParamId>,
    pub self_attn: Option<SelfAttnParams<ParamId>>,
    pub selective_gate: Option<SelectiveGateParams<ParamId>>,
    pub selective_attn: Option<SelectiveAttnParams<ParamId>>,
    pub classifier: ClassifierParams<ParamId>,
}

struct TapeLayout {
    embedding: EmbeddingTables<Var>,
    entity_gate: Option<EntityAwareGateParams<Var>>,
    pcnn: PcnnParams<Var>,
    self_attn: Option<SelfAttnParams<Var>>,
    selective_gate: Option<SelectiveGateParams<Var>>,
    selective_attn: Option<SelectiveAttnParams<Var>>,
    classifier: ClassifierParams<Var>,
}

impl Layout {
    fn on_tape(&self, leaves: &[Var]) -> TapeLayout {
        let c = &self.classifier;
        TapeLayout {
            embedding: self.embedding.on_tape(leaves),
            entity_gate: self.entity_gate.map(|p| p.on_tape(leaves)),
            pcnn: self.pcnn.on_tape(leaves),
            self_attn: self.self_attn.map(|p| p.on_tape(leaves)),
            selective_gate: self.selective_gate.map(|p| p.on_tape(leaves)),
            selective_attn: self.selective_attn.map(|p| p.on_tape(leaves)),
            classifier: ClassifierParams {
                w_cls: leaves[c.w_cls.index()],
                b_cls: leaves[c.b_cls.index()],
                w_out: leaves[c.w_out.index()],
                b_out: leaves[c.b_out.index()],
            },
        }
    }
}

/// Initial value of a named parameter. Keyed by name so that variants
/// sharing a parameter of equal shape start from identical values.
pub fn init_param(seed: u64, name: &str, shape: &[usize], scale: f64) -> Tensor {
    let mut rng = seeds::rng(seed, &[seeds::label_key(name)]);
    uniform(shape, scale, &mut rng)
}

fn build_layout(cfg: &ModelConfig, store: &mut ParamStore) -> Layout {
    // Embedding tables, the entity-aware gate and all biases draw from
    // ±init_scale. Other weight matrices use fan-scaled limits, which keeps
    // the signal from shrinking through the stacked layers.
    let mut add = |name: &str, shape: &[usize]| {
        let fixed = name.starts_with("embedding.") || name.starts_with("entity_gate.");
        let limit = match shape {
            [rows, rest @ ..] if !fixed && !rest.is_empty() => {
                let fan_in: usize = rest.iter().product();
                (6.0 / (fan_in + rows) as f64).sqrt()
            }
            _ => cfg.init_scale,
        };
        store.add(name, init_param(cfg.seed, name, shape, limit))
    };
    let v = cfg.variant;
    let (d_w, d_r, enc, sd) = (cfg.d_w, cfg.d_r, cfg.encoder_dim(), cfg.sentence_dim());

    let embedding = EmbeddingTables {
        word: add("embedding.word", &[cfg.vocab_size, d_w]),
        position: add("embedding.position", &[2 * cfg.pos_clip + 1, d_r]),
    };
    let entity_gate = v.entity_aware().then(|| EntityAwareGateParams {
        w_g1: add("entity_gate.w_g1", &[cfg.d_h, 3 * d_w]),
        b_g1: add("entity_gate.b_g1", &[cfg.d_h]),
        w_g2: add("entity_gate.w_g2", &[cfg.d_h, cfg.d_p()]),
        b_g2: add("entity_gate.b_g2", &[cfg.d_h]),
    });
    let pcnn = PcnnParams {
        w_c: add("pcnn.w_c", &[cfg.d_c, cfg.window, enc]),
        b_c: add("pcnn.b_c", &[cfg.d_c]),
    };
    let self_attn = v.self_attention().then(|| SelfAttnParams {
        w_a1: add("self_attn.w_a1", &[enc, enc]),
        b_a1: add("self_attn.b_a1", &[enc]),
        w_a2: add("self_attn.w_a2", &[enc, enc]),
        b_a2: add("self_attn.b_a2", &[enc]),
    });
    let selective_gate = v.selective_gate().then(|| SelectiveGateParams {
        w_sg1: add("selective_gate.w_sg1", &[sd, enc]),
        b_sg1: add("selective_gate.b_sg1", &[sd]),
        w_sg2: add("selective_gate.w_sg2", &[enc, enc]),
        b_sg2: add("selective_gate.b_sg2", &[enc]),
    });
    let selective_attn = v.selective_attention().then(|| SelectiveAttnParams {
        query: add("selective_attn.query", &[cfg.num_relations, sd]),
        bilinear: add("selective_attn.bilinear", &[sd, sd]),
    });
    let classifier = ClassifierParams {
        w_cls: add("classifier.w_cls", &[cfg.d_cls, cfg.bag_dim()]),
        b_cls: add("classifier.b_cls", &[cfg.d_cls]),
        w_out: add("classifier.w_out", &[cfg.num_relations, cfg.d_cls]),
        b_out: add("classifier.b_out", &[cfg.num_relations]),
    };
    Layout {
        embedding,
        entity_gate,
        pcnn,
        self_attn,
        selective_gate,
        selective_attn,
        classifier,
    }
}

/// Forward-pass mode. Training uses the gold relation as the attention
/// query and applies dropout to the bag vector when a seed is given.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { dropout_seed: Option<u64> },
}

impl Mode {
    /// Training mode with dropout disabled, for gradient checks.
    pub const TRAIN_DETERMINISTIC: Mode = Mode::Train { dropout_seed: None };
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagPrediction {
    pub probs: Vec<f64>,
    pub predicted: usize,
}

impl BagPrediction {
    fn from_probs(probs: Vec<f64>) -> Self {
        let predicted = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
        Self { probs, predicted }
    }

    pub fn confidence(&self, relation: usize) -> f64 {
        self.probs[relation]
    }
}

/// Gradients and loss for one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    /// Mean NLL plus the L2 term.
    pub loss: f64,
    pub nll: f64,
    /// One tensor per registry entry, in registry order.
    pub grads: Vec<Tensor>,
    /// Bags whose training-mode argmax equals the gold label.
    pub correct: usize,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore,
}

impl SegModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params);
        Ok(Self { config, layout, params })
    }

    /// Rebuilds a model around existing parameter values, checking that
    /// names and shapes match what `config` requires.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config)?;
        let want: Vec<_> = fresh.params.iter().map(|p| (&p.name, p.value.shape())).collect();
        let got: Vec<_> = params.iter().map(|p| (&p.name, p.value.shape())).collect();
        if want != got {
            return Err(SegError::Config(format!(
                "parameters do not match the model configuration: expected {:?}, found {:?}",
                want, got
            )));
        }
        Ok(Self { params, ..fresh })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Records the forward pass for one bag and returns its `[|C|]`
    /// probability vector. `leaves` are `params` registered on `tape`.
    pub fn bag_probs<'p>(
        &self,
        params: &'p ParamStore,
        tape: &mut Tape<'p>,
        leaves: &[Var],
        bag: &Bag,
        mode: Mode,
    ) -> Result<Var> {
        if bag.sentences.is_empty() {
            return Err(SegError::Data("empty bag".into()));
        }
        if leaves.len() != params.len() {
            return Err(SegError::Config(format!(
                "{} tape leaves for {} parameters",
                leaves.len(),
                params.len()
            )));
        }
        let cfg = &self.config;
        let lp = self.layout.on_tape(leaves);
        let (ss, us) = self.encode_sentences(tape, &lp, bag)?;

        let gates = match lp.selective_gate {
            Some(p) => Some(gate_values(tape, &us, &p, cfg.activation, cfg.scalar_gate)?),
            None => None,
        };

        if cfg.variant.selective_attention() {
            let attn = lp.selective_attn.expect("attention params present");
            let bag_vec = |tape: &mut Tape<'p>, r: usize| -> Result<Var> {
                let (c, _) = match &gates {
                    Some(gs) => gate_plus_attention_aggregate(tape, &ss, gs, r, &attn)?,
                    None => selective_attention_aggregate(tape, &ss, r, &attn)?,
                };
                Ok(c)
            };
            return match mode {
                Mode::Train { dropout_seed } => {
                    let c = bag_vec(tape, check_label(bag, cfg)?)?;
                    let logits = self.classify(tape, &lp, c, dropout_seed)?;
                    tape.softmax(logits, 0)
                }
                Mode::Eval => {
                    // one query per candidate relation; each contributes its
                    // own logit for that relation
                    let mut picked = Vec::with_capacity(cfg.num_relations);
                    for r in 0..cfg.num_relations {
                        let c = bag_vec(tape, r)?;
                        let logits = self.classify(tape, &lp, c, None)?;
                        picked.push(tape.index(logits, r)?);
                    }
                    let logits = tape.concat(&picked)?;
                    tape.softmax(logits, 0)
                }
            };
        }

        let c = match (cfg.variant, &gates) {
            (_, Some(gs)) => gate_aggregate(tape, &ss, gs)?,
            (Variant::SegWoGate, None) => concat_aggregate(tape, &ss, &us)?,
            _ => mean_aggregate(tape, &ss)?,
        };
        let dropout_seed = match mode {
            Mode::Train { dropout_seed } => dropout_seed,
            Mode::Eval => None,
        };
        let logits = self.classify(tape, &lp, c, dropout_seed)?;
        tape.softmax(logits, 0)
    }

    fn encode_sentences(
        &self,
        tape: &mut Tape<'_>,
        lp: &TapeLayout,
        bag: &Bag,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let cfg = &self.config;
        let mut ss = Vec::with_capacity(bag.sentences.len());
        let mut us = Vec::with_capacity(bag.sentences.len());
        for s in &bag.sentences {
            let x_p = embed_positional(tape, s, &lp.embedding, cfg.pos_clip)?;
            let x = match &lp.entity_gate {
                Some(g) => {
                    let x_e = embed_entity_concat(tape, s, &lp.embedding)?;
                    entity_aware_embed(tape, x_p, x_e, g, cfg.lambda)?
                }
                None => x_p,
            };
            let sent = match (cfg.variant, &lp.self_attn) {
                (Variant::SegStack, Some(a)) => stacked_encode(
                    tape,
                    x,
                    s.head_pos,
                    s.tail_pos,
                    &lp.pcnn,
                    a,
                    cfg.activation,
                    cfg.stack_residual,
                )?,
                _ => pcnn_encode(tape, x, s.head_pos, s.tail_pos, &lp.pcnn)?,
            };
            ss.push(sent);
            if let Some(a) = &lp.self_attn {
                us.push(self_attn_encode(tape, x, a, cfg.activation)?.0);
            }
        }
        Ok((ss, us))
    }

    fn classify(
        &self,
        tape: &mut Tape<'_>,
        lp: &TapeLayout,
        c: Var,
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let c = match dropout_seed {
            Some(seed) if p > 0.0 => {
                let mut rng = seeds::rng(seed, &[]);
                let keep = 1.0 / (1.0 - p);
                let n = tape.value(c).len();
                let mask: Vec<f64> =
                    (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                let mask = tape.constant(Tensor::vector(mask));
                tape.mul(c, mask)?
            }
            _ => c,
        };
        let cl = &lp.classifier;
        let h = tape.affine(cl.w_cls, c, cl.b_cls)?;
        let h = tape.relu(h);
        tape.affine(cl.w_out, h, cl.b_out)
    }

    pub fn forward_bag(&self, bag: &Bag, mode: Mode) -> Result<BagPrediction> {
        let mut tape = Tape::new();
        let leaves = self.params.register(&mut tape);
        let probs = self.bag_probs(&self.params, &mut tape, &leaves, bag, mode)?;
        Ok(BagPrediction::from_probs(tape.value(probs).data().to_vec()))
    }

    pub fn predict(&self, bag: &Bag) -> Result<BagPrediction> {
        self.forward_bag(bag, Mode::Eval)
    }

    /// Objective value `−mean log p_gold + β·Σθ²` under `params`.
    pub fn loss(&self, params: &ParamStore, bags: &[&Bag], mode: Mode) -> Result<f64> {
        if bags.is_empty() {
            return Err(SegError::Data("loss over an empty batch".into()));
        }
        let mut nll = 0.0;
        for bag in bags {
            let mut tape = Tape::new();
            let leaves = params.register(&mut tape);
            let probs = self.bag_probs(params, &mut tape, &leaves, bag, mode)?;
            let p = tape.value(probs).data()[check_label(bag, &self.config)?];
            nll -= p.max(LOG_FLOOR).ln();
        }
        Ok(nll / bags.len() as f64 + self.config.l2 * params.sum_squares())
    }

    /// Per-bag tapes evaluated under `exec`, combined in bag order. `mode`
    /// maps a bag's position in the batch to its forward mode.
    pub fn batch_gradient(
        &self,
        bags: &[&Bag],
        mode: impl Fn(usize) -> Mode + Sync + Send,
        exec: Exec,
    ) -> Result<BatchGradient> {
        if bags.is_empty() {
            return Err(SegError::Data("gradient over an empty batch".into()));
        }
        let per_bag = exec.map(bags, |i, bag| self.bag_gradient(bag, mode(i)));
        let scale = 1.0 / bags.len() as f64;
        let beta = self.config.l2;
        let mut grads: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| p.value.map(|v| 2.0 * beta * v))
            .collect();
        let mut nll = 0.0;
        let mut correct = 0;
        for r in per_bag {
            let (bag_nll, bag_grads, hit) = r?;
            nll += bag_nll;
            correct += usize::from(hit);
            for (dst, src) in grads.iter_mut().zip(&bag_grads) {
                for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                    *d += scale * s;
                }
            }
        }
        let nll = nll * scale;
        Ok(BatchGradient {
            loss: nll + beta * self.params.sum_squares(),
            nll,
            grads,
            correct,
        })
    }

    fn bag_gradient(&self, bag: &Bag, mode: Mode) -> Result<(f64, Vec<Tensor>, bool)> {
        let label = check_label(bag, &self.config)?;
        let mut tape = Tape::new();
        let leaves = self.params.register(&mut tape);
        let probs = self.bag_probs(&self.params, &mut tape, &leaves, bag, mode)?;
        let hit = BagPrediction::from_probs(tape.value(probs).data().to_vec()).predicted == label;
        let p = tape.index(probs, label)?;
        let logp = tape.log_floor(p, LOG_FLOOR);
        let nll = tape.scale(logp, -1.0);
        let value = tape.value(nll).item();
        let mut g = tape.backward(nll)?;
        Ok((value, self.params.collect_grads(&mut g, &leaves), hit))
    }
}

/// Batch seed used by default. Seed 0 places a ReLU pre-activation 8e-6
/// from zero, inside the ±1e-5 difference stencil.
pub const DEFAULT_GRADCHECK_SEED: u64 = 1;

/// Random bags of one, two and three sentences over the config's
/// vocabulary, used as the gradient-check batch.
pub fn gradcheck_bags(config: &ModelConfig, seed: u64) -> Vec<Bag> {
    let mut rng = seeds::rng(seed, &[seeds::label_key("gradcheck")]);
    let max_tokens = (2 * config.pos_clip).clamp(2, 8);
    (1..=3)
        .map(|m| random_bag(&mut rng, config.vocab_size, config.num_relations, m, max_tokens))
        .collect()
}

/// Compares the analytic batch gradient against central differences of the
/// full objective. `plant_fault` doubles the analytic gradient of the named
/// parameter, to confirm the check can fail.
pub fn check_gradients(
    config: &ModelConfig,
    bags: &[Bag],
    check: &GradCheckConfig,
    plant_fault: Option<&str>,
) -> Result<GradCheckReport> {
    if config.dropout > 0.0 {
        return Err(SegError::Config(format!(
            "gradient check needs a deterministic objective; dropout is {}",
            config.dropout
        )));
    }
    let model = SegModel::new(config.clone())?;
    let refs: Vec<&Bag> = bags.iter().collect();
    let mode = Mode::TRAIN_DETERMINISTIC;
    let mut analytic = model.batch_gradient(&refs, |_| mode, Exec::Sequential)?.grads;
    if let Some(name) = plant_fault {
        let id = model
            .params()
            .find(name)
            .ok_or_else(|| SegError::Config(format!("no parameter named {name:?}")))?;
        analytic[id.index()] = analytic[id.index()].map(|g| 2.0 * g);
    }
    let mut params = model.params().clone();
    grad_check(&mut params, &analytic, |p| model.loss(p, &refs, mode), check)
}

fn check_label(bag: &Bag, cfg: &ModelConfig) -> Result<usize> {
    if bag.label >= cfg.num_relations {
        return Err(SegError::Data(format!(
            "bag label {} outside [0, {})",
            bag.label, cfg.num_relations
        )));
    }
    Ok(bag.label)
}

#[cfg(test)]
mod tests;
