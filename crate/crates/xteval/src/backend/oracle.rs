//! Deterministic oracle backend: a GPU-free test double with configurable
//! knowledge and utilization rates, giving the measurement pipeline a known
//! ground truth.
//!
//! Knowledge: each fact in the universe is "known" by an independent seeded
//! Bernoulli draw at `knowledge_rate`, so the measured extraction fraction
//! concentrates on the configured rate as the diagnostic grows. Utilization
//! is decided per evaluation instance by the checkpoint scorer (see
//! `train::OracleUtilization`), making downstream accuracy an unbiased
//! estimator of `utilization_rate`.

use std::collections::{BTreeMap, BTreeSet};

use crate::kb::{normalize_surface, FactSet, FactUid};
use crate::seeding::{stream_u64, stream_unit};

use super::{
    ArchitectureKind, AssembledPrompt, BackendError, BackendInfo, FinetuneSession, ModelBackend,
    PromptTuningSession, ScoringHead, TokenId,
};

const UNK: TokenId = 0;

pub struct OracleBackend {
    knowledge_rate: f64,
    utilization_rate: f64,
    seed: u64,
    known: BTreeSet<FactUid>,
    words: Vec<String>,
    index: BTreeMap<String, TokenId>,
    gold_token: BTreeMap<FactUid, TokenId>,
}

impl OracleBackend {
    pub fn new(universe: &FactSet, knowledge_rate: f64, utilization_rate: f64, seed: u64) -> Self {
        let mut words = vec!["[UNK]".to_string()];
        let mut index = BTreeMap::new();
        index.insert("[UNK]".to_string(), UNK);
        let intern = |word: &str, words: &mut Vec<String>, index: &mut BTreeMap<String, TokenId>| {
            if !index.contains_key(word) {
                let id = words.len() as TokenId;
                words.push(word.to_string());
                index.insert(word.to_string(), id);
            }
        };
        for fact in universe.iter() {
            for surface in [&fact.head, &fact.relation, &fact.tail] {
                for word in surface.split_whitespace() {
                    intern(word, &mut words, &mut index);
                }
            }
        }
        let mut known = BTreeSet::new();
        let mut gold_token = BTreeMap::new();
        for fact in universe.iter() {
            let draw = stream_unit(
                "oracle.known",
                &[&seed.to_le_bytes(), fact.uid.as_bytes()],
            );
            if draw < knowledge_rate {
                known.insert(fact.uid.clone());
            }
            let tail_tokens: Vec<&str> = fact.tail.split_whitespace().collect();
            if tail_tokens.len() == 1 {
                if let Some(&id) = index.get(tail_tokens[0]) {
                    gold_token.insert(fact.uid.clone(), id);
                }
            }
        }
        OracleBackend {
            knowledge_rate,
            utilization_rate,
            seed,
            known,
            words,
            index,
            gold_token,
        }
    }

    pub fn knowledge_rate(&self) -> f64 {
        self.knowledge_rate
    }

    pub fn utilization_rate(&self) -> f64 {
        self.utilization_rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn knows(&self, uid: &FactUid) -> bool {
        self.known.contains(uid)
    }

    /// A deterministic non-gold token for facts the oracle does not know.
    fn distractor_token(&self, uid: &FactUid, gold: Option<TokenId>) -> TokenId {
        let vocab = self.words.len() as u64;
        let pick = stream_u64("oracle.distractor", &[&self.seed.to_le_bytes(), uid.as_bytes()]);
        match gold {
            Some(gold) if vocab > 1 => {
                // Uniform over the vocabulary minus the gold token.
                let slot = pick % (vocab - 1);
                let candidate = slot as TokenId;
                if candidate >= gold {
                    candidate + 1
                } else {
                    candidate
                }
            }
            _ => (pick % vocab) as TokenId,
        }
    }
}

impl ModelBackend for OracleBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            id: format!(
                "oracle(knowledge={},utilization={})",
                self.knowledge_rate, self.utilization_rate
            ),
            architecture: ArchitectureKind::EncoderMasked,
            embedding_dim: 0,
            context_length: usize::MAX,
            vocab_size: self.words.len(),
            parameter_count: 0,
        }
    }

    fn tokenize(&self, text: &str) -> Vec<TokenId> {
        normalize_surface(text)
            .split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    fn token_text(&self, token: TokenId) -> Option<String> {
        self.words.get(token as usize).cloned()
    }

    fn unknown_token(&self) -> Option<TokenId> {
        Some(UNK)
    }

    fn tail_scores(&self, prompt: &AssembledPrompt) -> Result<Vec<f64>, BackendError> {
        let gold = self.gold_token.get(prompt.fact_uid).copied();
        let top = self.top1_tail(prompt)?;
        let mut scores = Vec::with_capacity(self.words.len());
        for id in 0..self.words.len() as TokenId {
            // Deterministic base scores below 0.5; the predicted token gets 1.
            let base = 0.5
                * stream_unit(
                    "oracle.tail",
                    &[
                        &self.seed.to_le_bytes(),
                        prompt.fact_uid.as_bytes(),
                        &id.to_le_bytes(),
                    ],
                );
            scores.push(if id == top { 1.0 } else { base });
        }
        let _ = gold;
        Ok(scores)
    }

    fn top1_tail(&self, prompt: &AssembledPrompt) -> Result<TokenId, BackendError> {
        if self.words.is_empty() {
            return Err(BackendError::EmptyVocabulary);
        }
        let gold = self.gold_token.get(prompt.fact_uid).copied();
        match gold {
            Some(gold) if self.known.contains(prompt.fact_uid) => Ok(gold),
            _ => Ok(self.distractor_token(prompt.fact_uid, gold)),
        }
    }

    fn score_pair(
        &self,
        _head: &ScoringHead,
        query: &str,
        document: &str,
    ) -> Result<f64, BackendError> {
        Ok(stream_unit(
            "oracle.pair",
            &[&self.seed.to_le_bytes(), query.as_bytes(), document.as_bytes()],
        ))
    }

    fn pooled_representation(
        &self,
        _query: &str,
        _document: &str,
    ) -> Result<Vec<f64>, BackendError> {
        Ok(Vec::new())
    }

    fn prompt_session(
        &self,
        _relations: &BTreeSet<String>,
        _seed: u64,
    ) -> Result<Option<Box<dyn PromptTuningSession + '_>>, BackendError> {
        Ok(None)
    }

    fn finetune_session(
        &self,
        _head_seed: u64,
    ) -> Result<Option<Box<dyn FinetuneSession + '_>>, BackendError> {
        Ok(None)
    }

    fn inference_checkpoint(&self, run_seed: u64) -> Option<super::ModelCheckpoint> {
        Some(super::ModelCheckpoint::Oracle {
            utilization_rate: self.utilization_rate,
            seed: self.seed,
            run_seed,
        })
    }
}
