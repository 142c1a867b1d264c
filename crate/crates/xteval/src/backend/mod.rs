//! Model-backend contract shared by extraction, finetuning, and evaluation.
//!
//! A backend exposes a tokenizer, tail-slot prediction under soft prompts,
//! and joint (query, document) scoring through a value head. Backends that
//! support gradient training hand out session objects; the oracle test
//! double returns `None` and is handled structurally by each stage.

pub mod oracle;
pub mod tiny;

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{FactSet, FactUid};
use crate::seeding::stream_rng;
use rand::Rng;

pub type TokenId = u32;

/// Soft prompt length on each side of the head entity.
pub const PROMPT_LEN: usize = 3;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("input of {len} tokens exceeds context length {max}; truncation is disabled")]
    InputTooLong { len: usize, max: usize },
    #[error("unknown backend spec {0:?}")]
    UnknownSpec(String),
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error("backend {0} does not support gradient training")]
    NotTrainable(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty vocabulary")]
    EmptyVocabulary,
    #[error("no soft prompt provided for relation {0:?}")]
    MissingPrompt(String),
    #[error("prompt dimensionality {found} does not match backend width {expected}")]
    PromptDim { found: usize, expected: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    /// Bidirectional masked model: the tail slot is a mask token and the
    /// pooled representation sits at the [CLS] position.
    EncoderMasked,
    /// Causal decoder: the tail is the next token after the suffix prompts
    /// and the pooled representation sits at the last input token.
    DecoderCausal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendInfo {
    pub id: String,
    pub architecture: ArchitectureKind,
    pub embedding_dim: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub parameter_count: usize,
}

/// Linear value head mapping a pooled representation to a scalar score.
/// Freshly initialized per finetuning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoringHead {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub init_seed: u64,
}

impl ScoringHead {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng("scoring-head.init", &[&seed.to_le_bytes()]);
        let scale = if dim > 0 {
            1.0 / (dim as f64).sqrt()
        } else {
            0.0
        };
        let weights = (0..dim)
            .map(|_| normal_sample(&mut rng) * scale)
            .collect();
        ScoringHead {
            weights,
            bias: 0.0,
            init_seed: seed,
        }
    }

    pub fn score(&self, pooled: &[f64]) -> f64 {
        debug_assert_eq!(pooled.len(), self.weights.len());
        self.weights
            .iter()
            .zip(pooled)
            .map(|(w, h)| w * h)
            .sum::<f64>()
            + self.bias
    }
}

/// Box-Muller standard normal draw.
pub(crate) fn normal_sample<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-relation soft prompt: three prefix and three suffix vectors in the
/// backend's embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationPrompt {
    pub prefix: Vec<Vec<f64>>,
    pub suffix: Vec<Vec<f64>>,
}

impl RelationPrompt {
    pub fn zeros(dim: usize) -> Self {
        RelationPrompt {
            prefix: vec![vec![0.0; dim]; PROMPT_LEN],
            suffix: vec![vec![0.0; dim]; PROMPT_LEN],
        }
    }

    pub fn dim(&self) -> usize {
        self.prefix.first().map(|v| v.len()).unwrap_or(0)
    }

    pub fn validate(&self, dim: usize) -> Result<(), BackendError> {
        let ok = self.prefix.len() == PROMPT_LEN
            && self.suffix.len() == PROMPT_LEN
            && self.prefix.iter().chain(&self.suffix).all(|v| v.len() == dim);
        if ok {
            Ok(())
        } else {
            Err(BackendError::PromptDim {
                found: self.dim(),
                expected: dim,
            })
        }
    }
}

/// Assembled extraction input: soft prompts around the head entity with a
/// tail slot whose kind follows the architecture. The embedded order is
/// always prefix, head, suffix, slot.
#[derive(Debug, Clone, Copy)]
pub struct AssembledPrompt<'a> {
    pub relation: &'a str,
    pub head: &'a str,
    pub fact_uid: &'a FactUid,
    pub prompt: Option<&'a RelationPrompt>,
}

/// Highest-scoring index with the lowest-index tiebreak.
pub fn argmax_lowest_index(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            None => best = Some((i, s)),
            Some((_, b)) if s > b => best = Some((i, s)),
            _ => {}
        }
    }
    best.map(|(i, _)| i)
}

/// Full vocabulary ranking at the tail slot: descending score, ties broken
/// by the lower token index.
pub fn predict_tail_distribution(
    backend: &dyn ModelBackend,
    prompt: &AssembledPrompt,
) -> Result<Vec<(TokenId, f64)>, BackendError> {
    let scores = backend.tail_scores(prompt)?;
    let mut ranked: Vec<(TokenId, f64)> = scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| (i as TokenId, s))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Gradient-training session over per-relation soft prompts. The backbone
/// stays frozen; only the prompt vectors move.
pub trait PromptTuningSession {
    /// Forward pass for one fact; returns the tail cross-entropy loss and a
    /// tape id for the backward pass.
    fn forward(&mut self, relation: &str, head: &str, gold: TokenId)
        -> Result<(f64, usize), BackendError>;
    /// Backpropagate `scale * dLoss` through a tape into the prompt grads.
    fn backward(&mut self, tape: usize, scale: f64) -> Result<(), BackendError>;
    /// Apply one AdamW step to the prompt vectors and clear grads and tapes.
    fn optimizer_step(&mut self, lr: f64, weight_decay: f64);
    fn discard_tapes(&mut self);
    /// Current prompt vectors.
    fn export(&self) -> BTreeMap<String, RelationPrompt>;
    fn import(&mut self, prompts: &BTreeMap<String, RelationPrompt>) -> Result<(), BackendError>;
    /// Top-1 tail prediction under the session's current prompts.
    fn top1(&self, relation: &str, head: &str, uid: &FactUid) -> Result<TokenId, BackendError>;
}

/// Gradient-training session for cross-encoder finetuning. The session owns
/// a working copy of the backbone plus a fresh scoring head.
pub trait FinetuneSession {
    /// Forward one (query, document) pair; returns the score and a tape id.
    fn forward_pair(&mut self, query: &str, document: &str) -> Result<(f64, usize), BackendError>;
    /// Backpropagate dLoss/dScore through a tape into the parameter grads.
    fn backward(&mut self, tape: usize, d_score: f64) -> Result<(), BackendError>;
    /// Apply one AdamW step and clear grads and tapes.
    fn optimizer_step(&mut self, lr: f64, weight_decay: f64);
    fn discard_tapes(&mut self);
    /// Inference-mode scoring with the session's current parameters.
    fn score(&self, query: &str, document: &str) -> Result<f64, BackendError>;
    /// Snapshot the current parameters.
    fn checkpoint(&self) -> ModelCheckpoint;
    fn restore(&mut self, checkpoint: &ModelCheckpoint) -> Result<(), BackendError>;
}

/// The backend contract consumed by every pipeline stage.
pub trait ModelBackend: Send + Sync {
    fn info(&self) -> BackendInfo;

    fn tokenize(&self, text: &str) -> Vec<TokenId>;
    fn token_text(&self, token: TokenId) -> Option<String>;
    fn unknown_token(&self) -> Option<TokenId>;

    /// Vocabulary scores at the tail slot (mask position for encoder_masked,
    /// next-token position for decoder_causal). Scores are finite.
    fn tail_scores(&self, prompt: &AssembledPrompt) -> Result<Vec<f64>, BackendError>;

    /// Argmax of [`Self::tail_scores`] with the lowest-token-index tiebreak.
    /// Backends may override with a cheaper path.
    fn top1_tail(&self, prompt: &AssembledPrompt) -> Result<TokenId, BackendError> {
        let scores = self.tail_scores(prompt)?;
        argmax_lowest_index(&scores)
            .map(|i| i as TokenId)
            .ok_or(BackendError::EmptyVocabulary)
    }

    /// Joint (query, document) score through a value head. Deterministic
    /// given parameters; overlong input is an error, never truncated.
    fn score_pair(
        &self,
        head: &ScoringHead,
        query: &str,
        document: &str,
    ) -> Result<f64, BackendError>;

    /// Pooled sequence representation for a (query, document) pair; the
    /// position follows the architecture kind.
    fn pooled_representation(&self, query: &str, document: &str)
        -> Result<Vec<f64>, BackendError>;

    /// Soft-prompt training session; `None` for inference-only backends.
    fn prompt_session(
        &self,
        relations: &BTreeSet<String>,
        seed: u64,
    ) -> Result<Option<Box<dyn PromptTuningSession + '_>>, BackendError>;

    /// Finetuning session; `None` for inference-only backends.
    fn finetune_session(
        &self,
        head_seed: u64,
    ) -> Result<Option<Box<dyn FinetuneSession + '_>>, BackendError>;

    /// Checkpoint standing in for a finetuned model on backends whose
    /// "training" is a no-op (the oracle). `run_seed` separates independent
    /// runs. `None` for backends that train for real.
    fn inference_checkpoint(&self, run_seed: u64) -> Option<ModelCheckpoint> {
        let _ = run_seed;
        None
    }
}

/// Serialized model state written to run directories and reloaded by the
/// standalone `evaluate` verb.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelCheckpoint {
    Oracle {
        utilization_rate: f64,
        seed: u64,
        run_seed: u64,
    },
    Tiny(tiny::TinyCheckpoint),
}

/// Parsed backend identifier: `name` or `name(key=value,...)`.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Oracle { knowledge: f64, utilization: f64 },
    Tiny(tiny::TinySpec),
}

impl BackendSpec {
    pub fn parse(input: &str) -> Result<Self, BackendError> {
        let input = input.trim();
        let (name, args) = match input.find('(') {
            Some(open) => {
                if !input.ends_with(')') {
                    return Err(BackendError::InvalidSpec(format!(
                        "unbalanced parentheses in {input:?}"
                    )));
                }
                (&input[..open], &input[open + 1..input.len() - 1])
            }
            None => (input, ""),
        };
        let mut kv = BTreeMap::new();
        for pair in args.split(',') {
            let pair = pair.trim();
            if pair.is_empty() {
                continue;
            }
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                BackendError::InvalidSpec(format!("expected key=value, found {pair:?}"))
            })?;
            if kv.insert(key.trim().to_string(), value.trim().to_string()).is_some() {
                return Err(BackendError::InvalidSpec(format!("duplicate key {key:?}")));
            }
        }
        fn take_f64(
            kv: &mut BTreeMap<String, String>,
            key: &str,
            default: f64,
        ) -> Result<f64, BackendError> {
            match kv.remove(key) {
                None => Ok(default),
                Some(raw) => raw
                    .parse::<f64>()
                    .map_err(|_| BackendError::InvalidSpec(format!("bad float for {key}: {raw:?}"))),
            }
        }
        fn take_usize(
            kv: &mut BTreeMap<String, String>,
            key: &str,
            default: usize,
        ) -> Result<usize, BackendError> {
            match kv.remove(key) {
                None => Ok(default),
                Some(raw) => raw
                    .parse::<usize>()
                    .map_err(|_| BackendError::InvalidSpec(format!("bad integer for {key}: {raw:?}"))),
            }
        }
        fn take_u64(
            kv: &mut BTreeMap<String, String>,
            key: &str,
            default: u64,
        ) -> Result<u64, BackendError> {
            match kv.remove(key) {
                None => Ok(default),
                Some(raw) => raw
                    .parse::<u64>()
                    .map_err(|_| BackendError::InvalidSpec(format!("bad integer for {key}: {raw:?}"))),
            }
        }
        let spec = match name {
            "oracle" => {
                let knowledge = take_f64(&mut kv, "knowledge", 0.5)?;
                let utilization = take_f64(&mut kv, "utilization", 0.5)?;
                for rate in [knowledge, utilization] {
                    if !(0.0..=1.0).contains(&rate) {
                        return Err(BackendError::InvalidSpec(format!(
                            "oracle rates must lie in [0,1], got {rate}"
                        )));
                    }
                }
                BackendSpec::Oracle {
                    knowledge,
                    utilization,
                }
            }
            "tiny-mlm" | "tiny-causal" => {
                let arch = if name == "tiny-mlm" {
                    ArchitectureKind::EncoderMasked
                } else {
                    ArchitectureKind::DecoderCausal
                };
                let spec = tiny::TinySpec {
                    arch,
                    dim: take_usize(&mut kv, "dim", 48)?,
                    ff: take_usize(&mut kv, "ff", 96)?,
                    layers: take_usize(&mut kv, "layers", 2)?,
                    heads: take_usize(&mut kv, "heads", 4)?,
                    context: take_usize(&mut kv, "context", 64)?,
                    pretrain_epochs: take_usize(&mut kv, "pretrain_epochs", 150)?,
                    pretrain_batch: take_usize(&mut kv, "pretrain_batch", 16)?,
                    pretrain_lr: take_f64(&mut kv, "pretrain_lr", 2e-3)?,
                    pretrain_seed: take_u64(&mut kv, "pretrain_seed", 7)?,
                };
                if spec.dim == 0 || spec.ff == 0 || spec.layers == 0 || spec.context < 8 {
                    return Err(BackendError::InvalidSpec(
                        "tiny backend needs dim > 0, ff > 0, layers > 0, context >= 8".into(),
                    ));
                }
                if spec.heads == 0 || !spec.dim.is_multiple_of(spec.heads) {
                    return Err(BackendError::InvalidSpec(format!(
                        "dim {} must be a positive multiple of heads {}",
                        spec.dim, spec.heads
                    )));
                }
                BackendSpec::Tiny(spec)
            }
            other => return Err(BackendError::UnknownSpec(other.to_string())),
        };
        if let Some(key) = kv.keys().next() {
            return Err(BackendError::InvalidSpec(format!(
                "unknown key {key:?} for backend {name:?}"
            )));
        }
        Ok(spec)
    }

    /// Canonical string form; stable across runs and usable as a cache key.
    pub fn canonical_id(&self) -> String {
        match self {
            BackendSpec::Oracle {
                knowledge,
                utilization,
            } => format!("oracle(knowledge={knowledge},utilization={utilization})"),
            BackendSpec::Tiny(spec) => spec.canonical_id(),
        }
    }
}

/// Instantiate a backend over a fact universe. `stage_seed` feeds the
/// oracle's knowledge sampling; gradient backends take their pretraining
/// seed from the spec string so the pretrained artifact is stable across
/// stages.
pub fn create_backend(
    spec: &BackendSpec,
    universe: &FactSet,
    stage_seed: u64,
    cache_dir: Option<&std::path::Path>,
) -> Result<Box<dyn ModelBackend>, BackendError> {
    match spec {
        BackendSpec::Oracle {
            knowledge,
            utilization,
        } => Ok(Box::new(oracle::OracleBackend::new(
            universe,
            *knowledge,
            *utilization,
            stage_seed,
        ))),
        BackendSpec::Tiny(tiny_spec) => {
            let backend = tiny::TinyBackend::create(tiny_spec, universe, cache_dir)?;
            Ok(Box::new(backend))
        }
    }
}
