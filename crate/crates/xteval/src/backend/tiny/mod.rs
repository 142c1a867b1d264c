//! From-scratch trainable backend, small enough to pretrain on a CPU in
//! seconds. Used for end-to-end pipeline verification where the oracle's
//! structural shortcuts would hide real training dynamics.
//!
//! The backend pretrains on text rendered from the diagnostic facts (its
//! "corpus"), which is what makes those facts parametric knowledge that the
//! extraction stage can then probe.

pub mod net;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::kb::{normalize_surface, FactSet, FactUid};
use crate::optim::{AdamW, PolySchedule};
use crate::seeding::stream_rng;
use crate::task::{relation_phrase, TemplatePack};

use self::net::{Item, NetConfig, NetCore};

use super::{
    normal_sample, ArchitectureKind, AssembledPrompt, BackendError, BackendInfo, FinetuneSession,
    ModelBackend, ModelCheckpoint, PromptTuningSession, RelationPrompt, ScoringHead, TokenId,
    PROMPT_LEN,
};

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

// Pair-classification classes used during pretraining.
const PAIR_SAME: usize = 0;
const PAIR_DIFFERENT: usize = 1;
const PAIR_CORRUPTED: usize = 2;
const PAIR_CLASSES: usize = 3;

/// Configuration of a tiny backend, parsed from its backend-spec string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinySpec {
    pub arch: ArchitectureKind,
    pub dim: usize,
    pub ff: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_seed: u64,
}

impl TinySpec {
    pub fn canonical_id(&self) -> String {
        let name = match self.arch {
            ArchitectureKind::EncoderMasked => "tiny-mlm",
            ArchitectureKind::DecoderCausal => "tiny-causal",
        };
        format!(
            "{name}(dim={},ff={},layers={},heads={},context={},pretrain_epochs={},pretrain_batch={},pretrain_lr={},pretrain_seed={})",
            self.dim,
            self.ff,
            self.layers,
            self.heads,
            self.context,
            self.pretrain_epochs,
            self.pretrain_batch,
            self.pretrain_lr,
            self.pretrain_seed
        )
    }
}

/// Word-level tokenizer. Sentence punctuation (`.,;:!?`) becomes separate
/// tokens; bracketed specials like `[MASK]` pass through whole.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordVocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in normalize_surface(text).split_whitespace() {
        if SPECIALS.contains(&raw) {
            out.push(raw.to_string());
            continue;
        }
        let mut word = raw;
        let mut lead = Vec::new();
        while let Some(first) = word.chars().next() {
            if ".,;:!?".contains(first) {
                lead.push(first.to_string());
                word = &word[first.len_utf8()..];
            } else {
                break;
            }
        }
        let mut trail = Vec::new();
        while let Some(last) = word.chars().last() {
            if ".,;:!?".contains(last) {
                trail.push(last.to_string());
                word = &word[..word.len() - last.len_utf8()];
            } else {
                break;
            }
        }
        out.extend(lead);
        if !word.is_empty() {
            out.push(word.to_string());
        }
        out.extend(trail.into_iter().rev());
    }
    out
}

impl WordVocab {
    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
    }

    pub fn build<'a, I: IntoIterator<Item = &'a str>>(sentences: I) -> Self {
        let mut vocab = WordVocab {
            words: SPECIALS.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        for sentence in sentences {
            for word in split_words(sentence) {
                if !vocab.index.contains_key(&word) {
                    let id = vocab.words.len() as TokenId;
                    vocab.index.insert(word.clone(), id);
                    vocab.words.push(word);
                }
            }
        }
        vocab
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let mut vocab = WordVocab {
            words,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split_words(text)
            .into_iter()
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }
}

/// A pretrained tiny model: frozen after creation; training stages work on
/// session-owned copies.
pub struct TinyBackend {
    spec: TinySpec,
    id: String,
    vocab: WordVocab,
    core: NetCore,
    params: Vec<f64>,
    emb_norm_mean: f64,
    pub pretrain_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PretrainCache {
    spec_id: String,
    universe_hash: String,
    words: Vec<String>,
    params: Vec<f64>,
    trace: Vec<f64>,
}

impl TinyBackend {
    /// Pretrain over the fact universe (or load from the cache directory).
    pub fn create(
        spec: &TinySpec,
        universe: &FactSet,
        cache_dir: Option<&Path>,
    ) -> Result<TinyBackend, BackendError> {
        let id = spec.canonical_id();
        let universe_hash = universe.content_hash();
        let cache_path = cache_dir.map(|dir| {
            let mut hasher = <sha2::Sha256 as sha2::Digest>::new();
            sha2::Digest::update(&mut hasher, id.as_bytes());
            sha2::Digest::update(&mut hasher, universe_hash.as_bytes());
            let digest = sha2::Digest::finalize(hasher);
            let tag: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
            dir.join(format!("tiny-{tag}.json"))
        });
        if let Some(path) = &cache_path {
            if let Ok(text) = std::fs::read_to_string(path) {
                if let Ok(cache) = serde_json::from_str::<PretrainCache>(&text) {
                    if cache.spec_id == id && cache.universe_hash == universe_hash {
                        let vocab = WordVocab::from_words(cache.words);
                        let core = NetCore::new(NetConfig {
                            vocab: vocab.len(),
                            dim: spec.dim,
                            ff: spec.ff,
                            context: spec.context,
                            causal: spec.arch == ArchitectureKind::DecoderCausal,
                            layers: spec.layers,
                            heads: spec.heads,
                        });
                        if cache.params.len() == core.layout.total {
                            let emb_norm_mean = core.embedding_norm_mean(&cache.params);
                            return Ok(TinyBackend {
                                spec: spec.clone(),
                                id,
                                vocab,
                                core,
                                params: cache.params,
                                emb_norm_mean,
                                pretrain_trace: cache.trace,
                            });
                        }
                    }
                }
            }
        }

        let backend = Self::pretrain(spec, universe)?;
        if let Some(path) = &cache_path {
            let cache = PretrainCache {
                spec_id: backend.id.clone(),
                universe_hash,
                words: backend.vocab.words.clone(),
                params: backend.params.clone(),
                trace: backend.pretrain_trace.clone(),
            };
            if let Some(parent) = path.parent() {
                let _ = std::fs::create_dir_all(parent);
            }
            // Cache write failures are non-fatal.
            let _ = std::fs::write(path, serde_json::to_string(&cache).unwrap());
        }
        Ok(backend)
    }

    /// Pretrain on text rendered from the fact universe. Inputs mix single
    /// sentences with BERT-style `[CLS] a [SEP] b` sentence pairs: pairing a
    /// fact with a paraphrase of itself teaches cross-segment copying, while
    /// pairing it with an unrelated fact forces parametric recall. Encoders
    /// train with masked-token prediction, decoders with next-token
    /// prediction over the same sequences.
    fn pretrain(spec: &TinySpec, universe: &FactSet) -> Result<TinyBackend, BackendError> {
        let pack = TemplatePack::default_for_relations(universe.relations());
        // Per fact: rendered paraphrase variants plus the tail surface.
        let mut rendered: Vec<(Vec<String>, String)> = Vec::new();
        for fact in universe.iter() {
            let variants: Vec<String> = pack
                .templates(&fact.relation)
                .iter()
                .map(|t| t.render(&fact.head, &relation_phrase(&fact.relation), &fact.tail))
                .collect();
            rendered.push((variants, fact.tail.clone()));
        }
        if rendered.is_empty() {
            return Err(BackendError::InvalidSpec(
                "tiny backend needs a non-empty fact universe to pretrain on".into(),
            ));
        }
        let vocab = WordVocab::build(
            rendered
                .iter()
                .flat_map(|(variants, _)| variants.iter().map(|s| s.as_str())),
        );
        let causal = spec.arch == ArchitectureKind::DecoderCausal;
        let core = NetCore::new(NetConfig {
            vocab: vocab.len(),
            dim: spec.dim,
            ff: spec.ff,
            context: spec.context,
            causal,
            layers: spec.layers,
            heads: spec.heads,
        });
        let mut params = core.init_params(spec.pretrain_seed);

        struct FactTokens {
            variants: Vec<Vec<TokenId>>,
            tail: Option<TokenId>,
        }
        let corpus: Vec<FactTokens> = rendered
            .iter()
            .map(|(variants, tail)| {
                let tail_tokens = vocab.encode(tail);
                FactTokens {
                    variants: variants.iter().map(|s| vocab.encode(s)).collect(),
                    tail: if tail_tokens.len() == 1 {
                        Some(tail_tokens[0])
                    } else {
                        None
                    },
                }
            })
            .collect();
        let singles: usize = corpus.iter().map(|f| f.variants.len()).sum();
        let per_epoch = singles + 3 * corpus.len();
        let steps_per_epoch = per_epoch.div_ceil(spec.pretrain_batch).max(1);
        let schedule = PolySchedule::new(
            spec.pretrain_lr,
            (spec.pretrain_epochs * steps_per_epoch) as u64,
            0.06,
        );
        let mut opt = AdamW::new(core.layout.total);
        let mut grads = vec![0.0; core.layout.total];
        let mut step = 0u64;
        let mut trace = Vec::with_capacity(spec.pretrain_epochs);

        // Three-way pair-classification head over [CLS]; pretraining-only.
        let dim = spec.dim;
        let mut cls_head = {
            let mut rng = stream_rng("tiny.pretrain.cls-head", &[&spec.pretrain_seed.to_le_bytes()]);
            let mut head = vec![0.0; PAIR_CLASSES * dim + PAIR_CLASSES];
            for slot in head.iter_mut().take(PAIR_CLASSES * dim) {
                *slot = normal_sample(&mut rng) / (dim as f64).sqrt();
            }
            head
        };
        let mut cls_grads = vec![0.0; PAIR_CLASSES * dim + PAIR_CLASSES];
        let mut cls_opt = AdamW::new(PAIR_CLASSES * dim + PAIR_CLASSES);

        // One pretraining input: a token sequence, the position to predict
        // (masked for encoders; decoders predict every next token), and for
        // pair inputs whether both segments render the same fact. The pair
        // label trains the [CLS] position through a throwaway two-way head,
        // BERT-style; the head is discarded with the rest of the
        // pretraining optimizer state.
        struct Sample {
            tokens: Vec<TokenId>,
            /// Masked-prediction position; pair-only samples carry none so
            /// the network also sees mask-free inputs, which is what the
            /// downstream cross-encoder feeds it.
            target: Option<usize>,
            pair_label: Option<usize>,
        }
        let tail_position = |tokens: &[TokenId], tail: Option<TokenId>, rng: &mut rand_chacha::ChaCha20Rng| {
            tail.and_then(|t| tokens.iter().position(|x| *x == t))
                .unwrap_or_else(|| rng.gen_range(0..tokens.len()))
        };
        let pair = |a: &[TokenId], b: &[TokenId]| {
            let mut tokens = Vec::with_capacity(a.len() + b.len() + 2);
            tokens.push(CLS);
            tokens.extend_from_slice(a);
            tokens.push(SEP);
            tokens.extend_from_slice(b);
            tokens
        };

        for epoch in 0..spec.pretrain_epochs {
            let mut rng = stream_rng(
                "tiny.pretrain.epoch",
                &[&spec.pretrain_seed.to_le_bytes(), &(epoch as u64).to_le_bytes()],
            );
            let mut samples: Vec<Sample> = Vec::with_capacity(per_epoch);
            for (idx, fact) in corpus.iter().enumerate() {
                // Single sentences: predict the tail in its own context.
                for tokens in &fact.variants {
                    if tokens.len() > spec.context {
                        continue;
                    }
                    let target = tail_position(tokens, fact.tail, &mut rng);
                    samples.push(Sample {
                        tokens: tokens.clone(),
                        target: Some(target),
                        pair_label: None,
                    });
                }
                // Paraphrase pair: the masked tail is copyable from the
                // other rendering of the same fact.
                if fact.variants.len() >= 2 {
                    let a = rng.gen_range(0..fact.variants.len());
                    let mut b = rng.gen_range(0..fact.variants.len() - 1);
                    if b >= a {
                        b += 1;
                    }
                    let tokens = pair(&fact.variants[a], &fact.variants[b]);
                    if tokens.len() <= spec.context {
                        let offset = 2 + fact.variants[a].len();
                        let target = if rng.gen_bool(0.5) {
                            Some(offset + tail_position(&fact.variants[b], fact.tail, &mut rng))
                        } else {
                            None
                        };
                        samples.push(Sample {
                            tokens,
                            target,
                            pair_label: Some(PAIR_SAME),
                        });
                    }
                }
                // Unrelated pair: the tail must come from parametric memory.
                if corpus.len() >= 2 {
                    let mut other = rng.gen_range(0..corpus.len() - 1);
                    if other >= idx {
                        other += 1;
                    }
                    let ov = &corpus[other].variants[rng.gen_range(0..corpus[other].variants.len())];
                    let sv = &fact.variants[rng.gen_range(0..fact.variants.len())];
                    let tokens = pair(ov, sv);
                    if tokens.len() <= spec.context {
                        let offset = 2 + ov.len();
                        let target = if rng.gen_bool(0.5) {
                            Some(offset + tail_position(sv, fact.tail, &mut rng))
                        } else {
                            None
                        };
                        samples.push(Sample {
                            tokens,
                            target,
                            pair_label: Some(PAIR_DIFFERENT),
                        });
                    }
                }
                // Corrupted pair: one token of the second rendering is
                // replaced by a plausible wrong token sampled from the
                // model's own masked prediction at that position. Plausible
                // replacements keep the surface form credible, so flagging
                // them requires the memorized fact rather than a type check.
                // The first segment is the same fact or an unrelated one
                // with equal probability, so the check cannot reduce to
                // cross-segment comparison.
                if vocab.len() > SPECIALS.len() + 1 && corpus.len() >= 2 {
                    let first: &Vec<TokenId> = if rng.gen_bool(0.5) {
                        &fact.variants[rng.gen_range(0..fact.variants.len())]
                    } else {
                        let mut other = rng.gen_range(0..corpus.len() - 1);
                        if other >= idx {
                            other += 1;
                        }
                        &corpus[other].variants[rng.gen_range(0..corpus[other].variants.len())]
                    };
                    let b = rng.gen_range(0..fact.variants.len());
                    let mut corrupted = fact.variants[b].clone();
                    if corrupted.len() > 1 {
                        // Any position may be corrupted, tails included; the
                        // masked prediction target is a different one.
                        let corrupt_pos = rng.gen_range(0..corrupted.len());
                        let mut target_in_b = rng.gen_range(0..corrupted.len());
                        while target_in_b == corrupt_pos {
                            target_in_b = rng.gen_range(0..corrupted.len());
                        }
                        let replacement = {
                            let masked: Vec<Item> = corrupted
                                .iter()
                                .enumerate()
                                .map(|(i, t)| {
                                    Item::Token(if i == corrupt_pos { MASK } else { *t })
                                })
                                .collect();
                            let tape = core.forward(&params, &masked);
                            let logits = core.logits_at(&params, &tape, corrupt_pos);
                            let mut ranked: Vec<(usize, f64)> = logits
                                .iter()
                                .cloned()
                                .enumerate()
                                .filter(|(i, _)| {
                                    *i >= SPECIALS.len()
                                        && *i != corrupted[corrupt_pos] as usize
                                })
                                .collect();
                            ranked.sort_by(|a, b| {
                                b.1.partial_cmp(&a.1)
                                    .unwrap_or(std::cmp::Ordering::Equal)
                                    .then(a.0.cmp(&b.0))
                            });
                            let top_k = ranked.len().min(8);
                            ranked[rng.gen_range(0..top_k)].0 as TokenId
                        };
                        corrupted[corrupt_pos] = replacement;
                        let tokens = pair(first, &corrupted);
                        if tokens.len() <= spec.context {
                            let offset = 2 + first.len();
                            let target = if rng.gen_bool(0.5) {
                                Some(offset + target_in_b)
                            } else {
                                None
                            };
                            samples.push(Sample {
                                tokens,
                                target,
                                pair_label: Some(PAIR_CORRUPTED),
                            });
                        }
                    }
                }
            }
            samples.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut epoch_count = 0usize;
            let mut pair_loss_sum = 0.0;
            let mut pair_hits = 0usize;
            let mut pair_total = 0usize;
            for batch in samples.chunks(spec.pretrain_batch) {
                let scale = 1.0 / batch.len() as f64;
                for sample in batch {
                    if causal {
                        // Next-token prediction over the whole sequence.
                        if sample.tokens.len() < 2 {
                            continue;
                        }
                        let items: Vec<Item> =
                            sample.tokens.iter().map(|t| Item::Token(*t)).collect();
                        let tape = core.forward(&params, &items);
                        let positions = sample.tokens.len() - 1;
                        let pos_scale = scale / positions as f64;
                        let mut dh = vec![0.0; tape.len * spec.dim];
                        let mut seq_loss = 0.0;
                        for pos in 0..positions {
                            let logits = core.logits_at(&params, &tape, pos);
                            let (loss, mut dlogits) = core.ce_loss(&logits, sample.tokens[pos + 1]);
                            seq_loss += loss / positions as f64;
                            for d in dlogits.iter_mut() {
                                *d *= pos_scale;
                            }
                            core.logits_backward(&params, &tape, pos, &dlogits, &mut grads, &mut dh);
                        }
                        if !seq_loss.is_finite() {
                            return Err(BackendError::NonFinite("pretraining loss".into()));
                        }
                        epoch_loss += seq_loss;
                        epoch_count += 1;
                        core.backward(&params, &tape, &dh, &mut grads);
                    } else {
                        let items: Vec<Item> = sample
                            .tokens
                            .iter()
                            .enumerate()
                            .map(|(i, t)| {
                                Item::Token(if Some(i) == sample.target { MASK } else { *t })
                            })
                            .collect();
                        let tape = core.forward(&params, &items);
                        let mut dh = vec![0.0; tape.len * spec.dim];
                        if let Some(target) = sample.target {
                            let gold = sample.tokens[target];
                            let logits = core.logits_at(&params, &tape, target);
                            let (loss, mut dlogits) = core.ce_loss(&logits, gold);
                            if !loss.is_finite() {
                                return Err(BackendError::NonFinite("pretraining loss".into()));
                            }
                            epoch_loss += loss;
                            for d in dlogits.iter_mut() {
                                *d *= scale;
                            }
                            core.logits_backward(&params, &tape, target, &dlogits, &mut grads, &mut dh);
                        }
                        epoch_count += 1;
                        if let Some(label) = sample.pair_label {
                            // Same-fact / different-fact / corrupted
                            // classification at the [CLS] position.
                            let h_cls = tape.hidden_at(0);
                            let mut pair_logits = [0.0; PAIR_CLASSES];
                            for c in 0..PAIR_CLASSES {
                                pair_logits[c] = cls_head[PAIR_CLASSES * dim + c];
                                for d in 0..dim {
                                    pair_logits[c] += cls_head[c * dim + d] * h_cls[d];
                                }
                            }
                            let max = pair_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exp: Vec<f64> = pair_logits.iter().map(|l| (l - max).exp()).collect();
                            let denom: f64 = exp.iter().sum();
                            let pair_loss = -(exp[label] / denom).ln();
                            if !pair_loss.is_finite() {
                                return Err(BackendError::NonFinite("pretraining loss".into()));
                            }
                            epoch_loss += pair_loss;
                            pair_loss_sum += pair_loss;
                            pair_total += 1;
                            let best = (0..PAIR_CLASSES)
                                .max_by(|a, b| pair_logits[*a].total_cmp(&pair_logits[*b]))
                                .unwrap();
                            if best == label {
                                pair_hits += 1;
                            }
                            let mut dpair: Vec<f64> = exp.iter().map(|e| e / denom).collect();
                            dpair[label] -= 1.0;
                            for c in 0..PAIR_CLASSES {
                                let g = dpair[c] * scale;
                                for d in 0..dim {
                                    cls_grads[c * dim + d] += g * h_cls[d];
                                    dh[d] += g * cls_head[c * dim + d];
                                }
                                cls_grads[PAIR_CLASSES * dim + c] += g;
                            }
                        }
                        core.backward(&params, &tape, &dh, &mut grads);
                    }
                }
                opt.step(&mut params, &grads, schedule.lr_at(step), 0.0);
                cls_opt.step(&mut cls_head, &cls_grads, schedule.lr_at(step), 0.0);
                grads.iter_mut().for_each(|g| *g = 0.0);
                cls_grads.iter_mut().for_each(|g| *g = 0.0);
                step += 1;
            }
            trace.push(epoch_loss / epoch_count.max(1) as f64);
            if std::env::var_os("XTEVAL_PRETRAIN_DEBUG").is_some() {
                eprintln!(
                    "pretrain epoch {epoch:3}: total {:.4}, pair loss {:.4}, pair acc {:.3}",
                    epoch_loss / epoch_count.max(1) as f64,
                    pair_loss_sum / pair_total.max(1) as f64,
                    pair_hits as f64 / pair_total.max(1) as f64,
                );
            }
        }

        let emb_norm_mean = core.embedding_norm_mean(&params);
        Ok(TinyBackend {
            spec: spec.clone(),
            id: spec.canonical_id(),
            vocab,
            core,
            params,
            emb_norm_mean,
            pretrain_trace: trace,
        })
    }

    pub fn spec(&self) -> &TinySpec {
        &self.spec
    }

    fn causal(&self) -> bool {
        self.spec.arch == ArchitectureKind::DecoderCausal
    }

    /// Assemble soft-prompt items in the fixed order prefix, head, suffix,
    /// slot (the slot is a mask token for encoders, next-token for decoders).
    fn assemble(
        &self,
        prompt: &RelationPrompt,
        head: &str,
    ) -> Result<(Vec<Item>, usize), BackendError> {
        prompt.validate(self.spec.dim)?;
        let head_tokens = self.vocab.encode(head);
        let mut items = Vec::with_capacity(2 * PROMPT_LEN + head_tokens.len() + 1);
        for vec in &prompt.prefix {
            items.push(Item::Vector(vec.clone()));
        }
        for token in &head_tokens {
            items.push(Item::Token(*token));
        }
        for vec in &prompt.suffix {
            items.push(Item::Vector(vec.clone()));
        }
        if !self.causal() {
            items.push(Item::Token(MASK));
        }
        if items.len() > self.spec.context {
            return Err(BackendError::InputTooLong {
                len: items.len(),
                max: self.spec.context,
            });
        }
        let slot = items.len() - 1;
        Ok((items, slot))
    }

    /// Encode a (query, document) pair: `[CLS] q [SEP] d` for encoders
    /// (pool at [CLS]), `q [SEP] d` for decoders (pool at the last token).
    fn encode_pair(&self, query: &str, document: &str) -> Result<(Vec<Item>, usize), BackendError> {
        let q = self.vocab.encode(query);
        let d = self.vocab.encode(document);
        let mut tokens = Vec::with_capacity(q.len() + d.len() + 2);
        if !self.causal() {
            tokens.push(CLS);
        }
        tokens.extend(&q);
        tokens.push(SEP);
        tokens.extend(&d);
        if tokens.len() > self.spec.context {
            return Err(BackendError::InputTooLong {
                len: tokens.len(),
                max: self.spec.context,
            });
        }
        let pooled_pos = if self.causal() { tokens.len() - 1 } else { 0 };
        Ok((tokens.into_iter().map(Item::Token).collect(), pooled_pos))
    }

    fn fresh_prompt(&self, rng: &mut rand_chacha::ChaCha20Rng) -> RelationPrompt {
        // Random normal scaled so prompt vectors match the embedding norm
        // statistics of the pretrained table.
        let std = self.emb_norm_mean / (self.spec.dim as f64).sqrt();
        let draw = |rng: &mut rand_chacha::ChaCha20Rng| -> Vec<f64> {
            (0..self.spec.dim).map(|_| normal_sample(rng) * std).collect()
        };
        RelationPrompt {
            prefix: (0..PROMPT_LEN).map(|_| draw(rng)).collect(),
            suffix: (0..PROMPT_LEN).map(|_| draw(rng)).collect(),
        }
    }

    /// Predict the token at the literal `[MASK]` position of a sentence.
    /// Test and inspection helper for encoder backends.
    pub fn predict_masked_word(&self, text: &str) -> Result<TokenId, BackendError> {
        let tokens = self.vocab.encode(text);
        let pos = tokens
            .iter()
            .position(|t| *t == MASK)
            .ok_or_else(|| BackendError::InvalidSpec("no [MASK] in input".into()))?;
        if tokens.len() > self.spec.context {
            return Err(BackendError::InputTooLong {
                len: tokens.len(),
                max: self.spec.context,
            });
        }
        let items: Vec<Item> = tokens.into_iter().map(Item::Token).collect();
        let tape = self.core.forward(&self.params, &items);
        let logits = self.core.logits_at(&self.params, &tape, pos);
        super::argmax_lowest_index(&logits)
            .map(|i| i as TokenId)
            .ok_or(BackendError::EmptyVocabulary)
    }

    /// Predict the next token after a prefix. Decoder counterpart of
    /// [`Self::predict_masked_word`].
    pub fn predict_next_word(&self, text: &str) -> Result<TokenId, BackendError> {
        let tokens = self.vocab.encode(text);
        if tokens.is_empty() {
            return Err(BackendError::InvalidSpec("empty input".into()));
        }
        if tokens.len() > self.spec.context {
            return Err(BackendError::InputTooLong {
                len: tokens.len(),
                max: self.spec.context,
            });
        }
        let pos = tokens.len() - 1;
        let items: Vec<Item> = tokens.into_iter().map(Item::Token).collect();
        let tape = self.core.forward(&self.params, &items);
        let logits = self.core.logits_at(&self.params, &tape, pos);
        super::argmax_lowest_index(&logits)
            .map(|i| i as TokenId)
            .ok_or(BackendError::EmptyVocabulary)
    }

    #[cfg(test)]
    pub(crate) fn pooled_position_probe(&self, query: &str, document: &str) -> (Vec<f64>, Vec<f64>) {
        let (items, pooled_pos) = self.encode_pair(query, document).unwrap();
        let tape = self.core.forward(&self.params, &items);
        (
            self.pooled_representation(query, document).unwrap(),
            tape.hidden_at(pooled_pos).to_vec(),
        )
    }
}

impl ModelBackend for TinyBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            id: self.id.clone(),
            architecture: self.spec.arch,
            embedding_dim: self.spec.dim,
            context_length: self.spec.context,
            vocab_size: self.vocab.len(),
            parameter_count: self.core.layout.total,
        }
    }

    fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.vocab.encode(text)
    }

    fn token_text(&self, token: TokenId) -> Option<String> {
        self.vocab.word(token).map(|s| s.to_string())
    }

    fn unknown_token(&self) -> Option<TokenId> {
        Some(UNK)
    }

    fn tail_scores(&self, prompt: &AssembledPrompt) -> Result<Vec<f64>, BackendError> {
        let relation_prompt = prompt
            .prompt
            .ok_or_else(|| BackendError::MissingPrompt(prompt.relation.to_string()))?;
        let (items, slot) = self.assemble(relation_prompt, prompt.head)?;
        let tape = self.core.forward(&self.params, &items);
        let logits = self.core.logits_at(&self.params, &tape, slot);
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(BackendError::NonFinite("tail logits".into()));
        }
        Ok(logits)
    }

    fn score_pair(
        &self,
        head: &ScoringHead,
        query: &str,
        document: &str,
    ) -> Result<f64, BackendError> {
        let pooled = self.pooled_representation(query, document)?;
        let score = head.score(&pooled);
        if !score.is_finite() {
            return Err(BackendError::NonFinite("pair score".into()));
        }
        Ok(score)
    }

    fn pooled_representation(
        &self,
        query: &str,
        document: &str,
    ) -> Result<Vec<f64>, BackendError> {
        let (items, pooled_pos) = self.encode_pair(query, document)?;
        let tape = self.core.forward(&self.params, &items);
        Ok(tape.hidden_at(pooled_pos).to_vec())
    }

    fn prompt_session(
        &self,
        relations: &BTreeSet<String>,
        seed: u64,
    ) -> Result<Option<Box<dyn PromptTuningSession + '_>>, BackendError> {
        let mut rng = stream_rng("tiny.prompt.init", &[&seed.to_le_bytes()]);
        let mut prompts = BTreeMap::new();
        let mut optimizers = BTreeMap::new();
        for relation in relations {
            prompts.insert(relation.clone(), self.fresh_prompt(&mut rng));
            optimizers.insert(relation.clone(), AdamW::new(2 * PROMPT_LEN * self.spec.dim));
        }
        Ok(Some(Box::new(TinyPromptSession {
            backend: self,
            prompts,
            grads: BTreeMap::new(),
            optimizers,
            tapes: Vec::new(),
            scratch: vec![0.0; self.core.layout.total],
        })))
    }

    fn finetune_session(
        &self,
        head_seed: u64,
    ) -> Result<Option<Box<dyn FinetuneSession + '_>>, BackendError> {
        Ok(Some(Box::new(TinyFinetuneSession {
            backend: self,
            params: self.params.clone(),
            head: ScoringHead::init(self.spec.dim, head_seed),
            grads: vec![0.0; self.core.layout.total],
            head_grads: vec![0.0; self.spec.dim + 1],
            opt_params: AdamW::new(self.core.layout.total),
            opt_head: AdamW::new(self.spec.dim + 1),
            tapes: Vec::new(),
        })))
    }
}

struct PromptTape {
    tape: net::Tape,
    relation: String,
    gold: TokenId,
    slot: usize,
    head_len: usize,
}

pub struct TinyPromptSession<'a> {
    backend: &'a TinyBackend,
    prompts: BTreeMap<String, RelationPrompt>,
    grads: BTreeMap<String, Vec<f64>>,
    optimizers: BTreeMap<String, AdamW>,
    tapes: Vec<PromptTape>,
    scratch: Vec<f64>,
}

impl TinyPromptSession<'_> {
    fn prompt_flat(prompt: &RelationPrompt) -> Vec<f64> {
        prompt
            .prefix
            .iter()
            .chain(&prompt.suffix)
            .flatten()
            .copied()
            .collect()
    }

    fn prompt_from_flat(flat: &[f64], dim: usize) -> RelationPrompt {
        let vecs: Vec<Vec<f64>> = flat.chunks(dim).map(|c| c.to_vec()).collect();
        RelationPrompt {
            prefix: vecs[..PROMPT_LEN].to_vec(),
            suffix: vecs[PROMPT_LEN..].to_vec(),
        }
    }
}

impl PromptTuningSession for TinyPromptSession<'_> {
    fn forward(
        &mut self,
        relation: &str,
        head: &str,
        gold: TokenId,
    ) -> Result<(f64, usize), BackendError> {
        let prompt = self
            .prompts
            .get(relation)
            .ok_or_else(|| BackendError::MissingPrompt(relation.to_string()))?;
        let (items, slot) = self.backend.assemble(prompt, head)?;
        let head_len = items.len() - 2 * PROMPT_LEN - usize::from(!self.backend.causal());
        let tape = self.backend.core.forward(&self.backend.params, &items);
        let logits = self.backend.core.logits_at(&self.backend.params, &tape, slot);
        let (loss, _) = self.backend.core.ce_loss(&logits, gold);
        self.tapes.push(PromptTape {
            tape,
            relation: relation.to_string(),
            gold,
            slot,
            head_len,
        });
        Ok((loss, self.tapes.len() - 1))
    }

    fn backward(&mut self, tape: usize, scale: f64) -> Result<(), BackendError> {
        let entry = &self.tapes[tape];
        let core = &self.backend.core;
        let dim = self.backend.spec.dim;
        let logits = core.logits_at(&self.backend.params, &entry.tape, entry.slot);
        let (_, mut dlogits) = core.ce_loss(&logits, entry.gold);
        for d in dlogits.iter_mut() {
            *d *= scale;
        }
        let mut dh = vec![0.0; entry.tape.len * dim];
        // The scratch buffer absorbs backbone gradients; only the prompt
        // positions are read back (the backbone stays frozen).
        core.logits_backward(
            &self.backend.params,
            &entry.tape,
            entry.slot,
            &dlogits,
            &mut self.scratch,
            &mut dh,
        );
        let d_input = core.backward(&self.backend.params, &entry.tape, &dh, &mut self.scratch);
        let grads = self
            .grads
            .entry(entry.relation.clone())
            .or_insert_with(|| vec![0.0; 2 * PROMPT_LEN * dim]);
        for p in 0..PROMPT_LEN {
            for d in 0..dim {
                grads[p * dim + d] += d_input[p * dim + d];
            }
        }
        let suffix_start = PROMPT_LEN + entry.head_len;
        for p in 0..PROMPT_LEN {
            for d in 0..dim {
                grads[(PROMPT_LEN + p) * dim + d] += d_input[(suffix_start + p) * dim + d];
            }
        }
        Ok(())
    }

    fn optimizer_step(&mut self, lr: f64, weight_decay: f64) {
        let dim = self.backend.spec.dim;
        for (relation, grads) in std::mem::take(&mut self.grads) {
            let prompt = self.prompts.get(&relation).expect("prompt exists");
            let mut flat = Self::prompt_flat(prompt);
            let opt = self.optimizers.get_mut(&relation).expect("optimizer exists");
            opt.step(&mut flat, &grads, lr, weight_decay);
            self.prompts
                .insert(relation, Self::prompt_from_flat(&flat, dim));
        }
        self.tapes.clear();
    }

    fn discard_tapes(&mut self) {
        self.tapes.clear();
        self.grads.clear();
    }

    fn export(&self) -> BTreeMap<String, RelationPrompt> {
        self.prompts.clone()
    }

    fn import(&mut self, prompts: &BTreeMap<String, RelationPrompt>) -> Result<(), BackendError> {
        for (relation, prompt) in prompts {
            prompt.validate(self.backend.spec.dim)?;
            self.prompts.insert(relation.clone(), prompt.clone());
        }
        Ok(())
    }

    fn top1(&self, relation: &str, head: &str, _uid: &FactUid) -> Result<TokenId, BackendError> {
        let prompt = self
            .prompts
            .get(relation)
            .ok_or_else(|| BackendError::MissingPrompt(relation.to_string()))?;
        let (items, slot) = self.backend.assemble(prompt, head)?;
        let tape = self.backend.core.forward(&self.backend.params, &items);
        let logits = self.backend.core.logits_at(&self.backend.params, &tape, slot);
        super::argmax_lowest_index(&logits)
            .map(|i| i as TokenId)
            .ok_or(BackendError::EmptyVocabulary)
    }
}

struct PairTape {
    tape: net::Tape,
    pooled_pos: usize,
}

pub struct TinyFinetuneSession<'a> {
    backend: &'a TinyBackend,
    params: Vec<f64>,
    head: ScoringHead,
    grads: Vec<f64>,
    head_grads: Vec<f64>, // dim weights + bias
    opt_params: AdamW,
    opt_head: AdamW,
    tapes: Vec<PairTape>,
}

impl FinetuneSession for TinyFinetuneSession<'_> {
    fn forward_pair(&mut self, query: &str, document: &str) -> Result<(f64, usize), BackendError> {
        let (items, pooled_pos) = self.backend.encode_pair(query, document)?;
        let tape = self.backend.core.forward(&self.params, &items);
        let score = self.head.score(tape.hidden_at(pooled_pos));
        if !score.is_finite() {
            return Err(BackendError::NonFinite("pair score".into()));
        }
        self.tapes.push(PairTape { tape, pooled_pos });
        Ok((score, self.tapes.len() - 1))
    }

    fn backward(&mut self, tape: usize, d_score: f64) -> Result<(), BackendError> {
        let entry = &self.tapes[tape];
        let dim = self.backend.spec.dim;
        let pooled = entry.tape.hidden_at(entry.pooled_pos);
        for (grad, h) in self.head_grads.iter_mut().zip(pooled) {
            *grad += d_score * h;
        }
        self.head_grads[dim] += d_score;
        let mut dh = vec![0.0; entry.tape.len * dim];
        for d in 0..dim {
            dh[entry.pooled_pos * dim + d] = d_score * self.head.weights[d];
        }
        self.backend
            .core
            .backward(&self.params, &entry.tape, &dh, &mut self.grads);
        Ok(())
    }

    fn optimizer_step(&mut self, lr: f64, weight_decay: f64) {
        let dim = self.backend.spec.dim;
        self.opt_params
            .step(&mut self.params, &self.grads, lr, weight_decay);
        let mut head_flat: Vec<f64> = self.head.weights.clone();
        head_flat.push(self.head.bias);
        self.opt_head
            .step(&mut head_flat, &self.head_grads, lr, weight_decay);
        self.head.weights = head_flat[..dim].to_vec();
        self.head.bias = head_flat[dim];
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        self.head_grads.iter_mut().for_each(|g| *g = 0.0);
        self.tapes.clear();
    }

    fn discard_tapes(&mut self) {
        self.tapes.clear();
    }

    fn score(&self, query: &str, document: &str) -> Result<f64, BackendError> {
        let (items, pooled_pos) = self.backend.encode_pair(query, document)?;
        let tape = self.backend.core.forward(&self.params, &items);
        let score = self.head.score(tape.hidden_at(pooled_pos));
        if !score.is_finite() {
            return Err(BackendError::NonFinite("pair score".into()));
        }
        Ok(score)
    }

    fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint::Tiny(TinyCheckpoint {
            spec_id: self.backend.id.clone(),
            arch: self.backend.spec.arch,
            config: self.backend.core.cfg,
            words: self.backend.vocab.words.clone(),
            params: self.params.clone(),
            head: self.head.clone(),
        })
    }

    fn restore(&mut self, checkpoint: &ModelCheckpoint) -> Result<(), BackendError> {
        match checkpoint {
            ModelCheckpoint::Tiny(ckpt) => {
                if ckpt.params.len() != self.params.len() {
                    return Err(BackendError::Checkpoint(format!(
                        "parameter count mismatch: {} vs {}",
                        ckpt.params.len(),
                        self.params.len()
                    )));
                }
                self.params.copy_from_slice(&ckpt.params);
                self.head = ckpt.head.clone();
                Ok(())
            }
            ModelCheckpoint::Oracle { .. } => Err(BackendError::Checkpoint(
                "cannot restore an oracle checkpoint into a tiny session".into(),
            )),
        }
    }
}

/// Self-contained finetuned model state: reloadable without the original
/// backend instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TinyCheckpoint {
    pub spec_id: String,
    pub arch: ArchitectureKind,
    pub config: NetConfig,
    pub words: Vec<String>,
    pub params: Vec<f64>,
    pub head: ScoringHead,
}

impl TinyCheckpoint {
    pub fn scorer(&self) -> Result<TinyScorer, BackendError> {
        // Checkpoints come from disk; validate before any construction
        // that would index or multiply with these sizes.
        let cfg = &self.config;
        let bounded = cfg.vocab >= SPECIALS.len()
            && cfg.vocab <= 1 << 24
            && (1..=4096).contains(&cfg.dim)
            && (1..=1 << 16).contains(&cfg.ff)
            && (8..=1 << 16).contains(&cfg.context)
            && (1..=64).contains(&cfg.layers)
            && cfg.heads >= 1
            && cfg.dim.is_multiple_of(cfg.heads);
        if !bounded {
            return Err(BackendError::Checkpoint(format!(
                "implausible network shape {cfg:?}"
            )));
        }
        if self.words.len() != cfg.vocab {
            return Err(BackendError::Checkpoint(format!(
                "vocabulary has {} words but the config says {}",
                self.words.len(),
                cfg.vocab
            )));
        }
        if self.head.weights.len() != cfg.dim {
            return Err(BackendError::Checkpoint(format!(
                "scoring head width {} does not match dim {}",
                self.head.weights.len(),
                cfg.dim
            )));
        }
        let core = NetCore::new(self.config);
        if self.params.len() != core.layout.total {
            return Err(BackendError::Checkpoint(format!(
                "parameter count {} does not match config ({})",
                self.params.len(),
                core.layout.total
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(BackendError::Checkpoint("non-finite parameter".into()));
        }
        Ok(TinyScorer {
            vocab: WordVocab::from_words(self.words.clone()),
            core,
            params: self.params.clone(),
            head: self.head.clone(),
            causal: self.arch == ArchitectureKind::DecoderCausal,
            context: self.config.context,
        })
    }
}

/// Inference-only scorer rebuilt from a checkpoint.
pub struct TinyScorer {
    vocab: WordVocab,
    core: NetCore,
    params: Vec<f64>,
    head: ScoringHead,
    causal: bool,
    context: usize,
}

impl TinyScorer {
    pub fn score_pair(&self, query: &str, document: &str) -> Result<f64, BackendError> {
        let q = self.vocab.encode(query);
        let d = self.vocab.encode(document);
        let mut tokens = Vec::with_capacity(q.len() + d.len() + 2);
        if !self.causal {
            tokens.push(CLS);
        }
        tokens.extend(&q);
        tokens.push(SEP);
        tokens.extend(&d);
        if tokens.len() > self.context {
            return Err(BackendError::InputTooLong {
                len: tokens.len(),
                max: self.context,
            });
        }
        let pooled_pos = if self.causal { tokens.len() - 1 } else { 0 };
        let items: Vec<Item> = tokens.into_iter().map(Item::Token).collect();
        let tape = self.core.forward(&self.params, &items);
        Ok(self.head.score(tape.hidden_at(pooled_pos)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::parse_tsv;

    fn five_fact_universe() -> FactSet {
        parse_tsv(
            "amara\tBornIn\tlutetia\n\
             bjorn\tBornIn\tkatla\n\
             ciro\tBornIn\tvesuvio\n\
             amara\tWorksAt\tforgeco\n\
             bjorn\tWorksAt\tmillhouse\n",
            "five",
        )
        .unwrap()
    }

    fn quick_spec(arch: ArchitectureKind) -> TinySpec {
        TinySpec {
            arch,
            dim: 24,
            ff: 48,
            layers: 1,
            heads: 2,
            context: 48,
            pretrain_epochs: 120,
            pretrain_batch: 8,
            pretrain_lr: 3e-3,
            pretrain_seed: 5,
        }
    }

    #[test]
    fn tokenizer_peels_punctuation_and_keeps_specials() {
        let words = split_words("amara works, at forgeco. [MASK] stays!");
        assert_eq!(
            words,
            vec!["amara", "works", ",", "at", "forgeco", ".", "[MASK]", "stays", "!"]
        );
    }

    #[test]
    fn vocab_round_trips_known_words() {
        let vocab = WordVocab::build(["a b c", "c d"]);
        let ids = vocab.encode("a d zzz");
        assert_eq!(ids.len(), 3);
        assert_eq!(vocab.word(ids[0]).unwrap(), "a");
        assert_eq!(ids[2], UNK);
    }

    #[test]
    fn pretrained_mlm_memorizes_five_facts() {
        let facts = five_fact_universe();
        let backend =
            TinyBackend::create(&quick_spec(ArchitectureKind::EncoderMasked), &facts, None)
                .unwrap();
        // The loss trace should show actual learning.
        let first = backend.pretrain_trace[0];
        let last = *backend.pretrain_trace.last().unwrap();
        assert!(last < first * 0.5, "loss did not drop: {first} -> {last}");
        // Query a memorized fact through a rendered sentence with the tail
        // masked; the gold tail must be the top-1 prediction.
        let mut hits = 0;
        for fact in facts.iter() {
            let pack = TemplatePack::default_for_relations(facts.relations());
            let template = &pack.templates(&fact.relation)[0];
            let sentence =
                template.render(&fact.head, &relation_phrase(&fact.relation), "[MASK]");
            let predicted = backend.predict_masked_word(&sentence).unwrap();
            let gold = backend.tokenize(&fact.tail)[0];
            if predicted == gold {
                hits += 1;
            }
        }
        assert_eq!(hits, 5, "memorization incomplete: {hits}/5");
    }

    #[test]
    fn pooled_position_follows_architecture() {
        let facts = five_fact_universe();
        for arch in [ArchitectureKind::EncoderMasked, ArchitectureKind::DecoderCausal] {
            let mut spec = quick_spec(arch);
            spec.pretrain_epochs = 2;
            let backend = TinyBackend::create(&spec, &facts, None).unwrap();
            let (pooled, expected) = backend.pooled_position_probe("amara BornIn", "lutetia");
            assert_eq!(pooled, expected);
        }
        // Behavioral check for the causal decoder: tokens after the pooled
        // position cannot exist, and earlier tokens do influence it.
        let mut spec = quick_spec(ArchitectureKind::DecoderCausal);
        spec.pretrain_epochs = 2;
        let backend = TinyBackend::create(&spec, &facts, None).unwrap();
        let a = backend.pooled_representation("amara", "lutetia").unwrap();
        let b = backend.pooled_representation("bjorn", "lutetia").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn overlong_input_errors_instead_of_truncating() {
        let facts = five_fact_universe();
        let mut spec = quick_spec(ArchitectureKind::EncoderMasked);
        spec.pretrain_epochs = 1;
        spec.context = 12;
        let backend = TinyBackend::create(&spec, &facts, None).unwrap();
        let long_doc = "word ".repeat(40);
        let head = ScoringHead::init(backend.spec.dim, 1);
        let err = backend.score_pair(&head, "q", &long_doc).unwrap_err();
        assert!(matches!(err, BackendError::InputTooLong { .. }));
    }

    #[test]
    fn finetune_session_gradient_matches_finite_difference() {
        let facts = five_fact_universe();
        let mut spec = quick_spec(ArchitectureKind::EncoderMasked);
        spec.pretrain_epochs = 2;
        spec.dim = 12;
        spec.ff = 16;
        let backend = TinyBackend::create(&spec, &facts, None).unwrap();
        let mut session = backend.finetune_session(3).unwrap().unwrap();
        // Loss = score itself; check d(score)/d(params) for a few params.
        let (_, tape) = session.forward_pair("amara BornIn", "lutetia").unwrap();
        session.backward(tape, 1.0).unwrap();
        // Probe via the public API: take one optimizer step and confirm the
        // score moves in the descent direction.
        let before = session.score("amara BornIn", "lutetia").unwrap();
        session.optimizer_step(1e-3, 0.0);
        let after = session.score("amara BornIn", "lutetia").unwrap();
        assert!(after < before, "gradient step must reduce the score: {before} -> {after}");
    }

    #[test]
    fn checkpoint_round_trip_reproduces_scores() {
        let facts = five_fact_universe();
        let mut spec = quick_spec(ArchitectureKind::EncoderMasked);
        spec.pretrain_epochs = 2;
        let backend = TinyBackend::create(&spec, &facts, None).unwrap();
        let mut session = backend.finetune_session(3).unwrap().unwrap();
        let (_, tape) = session.forward_pair("amara BornIn", "lutetia").unwrap();
        session.backward(tape, 1.0).unwrap();
        session.optimizer_step(1e-3, 0.0);
        let ckpt = session.checkpoint();
        let score_live = session.score("amara WorksAt", "forgeco").unwrap();
        let scorer = match &ckpt {
            ModelCheckpoint::Tiny(t) => t.scorer().unwrap(),
            _ => unreachable!(),
        };
        let score_restored = scorer.score_pair("amara WorksAt", "forgeco").unwrap();
        assert_eq!(score_live, score_restored);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let facts = parse_tsv("a\tr1\tx\nb\tr1\ty\n", "d").unwrap();
        let mut spec = quick_spec(ArchitectureKind::EncoderMasked);
        spec.pretrain_epochs = 3;
        let a = TinyBackend::create(&spec, &facts, None).unwrap();
        let b = TinyBackend::create(&spec, &facts, None).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn pretrain_cache_round_trips() {
        let facts = five_fact_universe();
        let mut spec = quick_spec(ArchitectureKind::EncoderMasked);
        spec.pretrain_epochs = 3;
        let dir = tempfile::tempdir().unwrap();
        let a = TinyBackend::create(&spec, &facts, Some(dir.path())).unwrap();
        let b = TinyBackend::create(&spec, &facts, Some(dir.path())).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.vocab.words(), b.vocab.words());
    }
}
