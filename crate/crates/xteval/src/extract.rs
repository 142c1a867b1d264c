//! Knowledge extraction: train per-relation soft prompts against a frozen
//! backbone, then collect the facts whose gold tail the backend ranks first.
//! The resulting snapshot is the basis for downstream task construction.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    AssembledPrompt, BackendError, ModelBackend, RelationPrompt, TokenId,
};
use crate::kb::{FactSet, FactUid, KbError};
use crate::optim::PolySchedule;
use crate::seeding::stream_rng;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("relation {0:?} appears in the validation set but not in training")]
    ValRelationMissing(String),
    #[error("divergent loss (non-finite) while training prompts for relation {relation:?} at epoch {epoch}")]
    Divergent { relation: String, epoch: usize },
    #[error("no soft prompt covers relation {0:?}")]
    PromptCoverage(String),
    #[error("training set is empty")]
    EmptyTrain,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed snapshot manifest: {0}")]
    Manifest(String),
}

/// Soft-prompt training hyperparameters. Defaults follow the knowledge
/// extraction stage settings: AdamW, lr 1e-4, no weight decay, batch 64,
/// polynomial decay with 6% warmup, 20 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            learning_rate: 1e-4,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 20,
            warmup_fraction: 0.06,
            validation_fraction: 0.1,
        }
    }
}

/// Trained prompt vectors, one entry per training relation, plus the
/// validation accuracy that selected the returned checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftPromptSet {
    pub prompts: BTreeMap<String, RelationPrompt>,
    pub seed: u64,
    pub selection_metric: f64,
    /// Validation top-1 accuracy per checkpoint; index 0 is the untrained
    /// prompt baseline.
    pub val_trace: Vec<f64>,
}

/// The facts a backend predicts correctly, with provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeSnapshot {
    pub facts: FactSet,
    pub extraction_fraction: f64,
    pub backend_id: String,
    pub seed: u64,
    pub diagnostic_size: usize,
}

/// Relation-stratified holdout split used for prompt training.
pub fn stratified_split(facts: &FactSet, val_fraction: f64, seed: u64) -> (FactSet, FactSet) {
    let mut by_relation: BTreeMap<&str, Vec<&crate::kb::Fact>> = BTreeMap::new();
    for fact in facts.iter() {
        by_relation.entry(&fact.relation).or_default().push(fact);
    }
    let mut val_uids = std::collections::BTreeSet::new();
    for (relation, group) in &by_relation {
        let k = ((group.len() as f64) * val_fraction).floor() as usize;
        if k == 0 {
            continue;
        }
        let mut rng = stream_rng(
            "extract.val-split",
            &[&seed.to_le_bytes(), relation.as_bytes()],
        );
        let mut indices: Vec<usize> = (0..group.len()).collect();
        indices.shuffle(&mut rng);
        for &i in indices.iter().take(k) {
            val_uids.insert(group[i].uid.clone());
        }
    }
    let train = FactSet::from_facts(
        facts.iter().filter(|f| !val_uids.contains(&f.uid)).cloned(),
        format!("{} [prompt-train]", facts.source),
    );
    let val = facts.subset(&val_uids, format!("{} [prompt-val]", facts.source));
    (train, val)
}

struct FactExample<'a> {
    relation: &'a str,
    head: &'a str,
    uid: &'a FactUid,
    gold: TokenId,
}

fn single_token_examples<'a>(
    backend: &dyn ModelBackend,
    facts: &'a FactSet,
) -> Vec<FactExample<'a>> {
    facts
        .iter()
        .filter_map(|fact| {
            let tokens = backend.tokenize(&fact.tail);
            if tokens.len() == 1 && Some(tokens[0]) != backend.unknown_token() {
                Some(FactExample {
                    relation: &fact.relation,
                    head: &fact.head,
                    uid: &fact.uid,
                    gold: tokens[0],
                })
            } else {
                None
            }
        })
        .collect()
}

/// Train one soft prompt per training relation and return the checkpoint
/// with the best validation top-1 accuracy. For backends without gradient
/// training (the oracle) this is a no-op that still reports the validation
/// metric under the backend's own predictions.
pub fn train_soft_prompts(
    backend: &dyn ModelBackend,
    train_facts: &FactSet,
    val_facts: &FactSet,
    cfg: &ExtractionConfig,
    seed: u64,
) -> Result<SoftPromptSet, ExtractError> {
    if train_facts.is_empty() {
        return Err(ExtractError::EmptyTrain);
    }
    for relation in val_facts.relations() {
        if !train_facts.relations().contains(relation) {
            return Err(ExtractError::ValRelationMissing(relation.clone()));
        }
    }
    let relations = train_facts.relations().clone();
    let session = backend.prompt_session(&relations, seed)?;
    let val_examples = single_token_examples(backend, val_facts);

    let Some(mut session) = session else {
        // Inference-only backend: prompts are untrained placeholders and the
        // selection metric is the backend's own validation accuracy.
        let dim = backend.info().embedding_dim;
        let prompts: BTreeMap<String, RelationPrompt> = relations
            .iter()
            .map(|r| (r.clone(), RelationPrompt::zeros(dim)))
            .collect();
        let mut correct = 0usize;
        for example in &val_examples {
            let prompt = AssembledPrompt {
                relation: example.relation,
                head: example.head,
                fact_uid: example.uid,
                prompt: prompts.get(example.relation),
            };
            if backend.top1_tail(&prompt)? == example.gold {
                correct += 1;
            }
        }
        let accuracy = if val_examples.is_empty() {
            0.0
        } else {
            correct as f64 / val_examples.len() as f64
        };
        return Ok(SoftPromptSet {
            prompts,
            seed,
            selection_metric: accuracy,
            val_trace: vec![accuracy],
        });
    };

    let mut by_relation: BTreeMap<&str, Vec<&FactExample>> = BTreeMap::new();
    let train_examples = single_token_examples(backend, train_facts);
    for example in &train_examples {
        by_relation.entry(example.relation).or_default().push(example);
    }
    let steps_per_epoch: u64 = by_relation
        .values()
        .map(|group| group.len().div_ceil(cfg.batch_size).max(1) as u64)
        .sum();
    let schedule = PolySchedule::new(
        cfg.learning_rate,
        steps_per_epoch * cfg.epochs as u64,
        cfg.warmup_fraction,
    );

    let validate = |session: &dyn crate::backend::PromptTuningSession| -> Result<f64, ExtractError> {
        if val_examples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for example in &val_examples {
            if session.top1(example.relation, example.head, example.uid)? == example.gold {
                correct += 1;
            }
        }
        Ok(correct as f64 / val_examples.len() as f64)
    };

    let baseline = validate(session.as_ref())?;
    let mut val_trace = vec![baseline];
    let mut best_metric = baseline;
    let mut best_prompts = session.export();
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        for (relation, group) in &by_relation {
            let mut order: Vec<usize> = (0..group.len()).collect();
            let mut rng = stream_rng(
                "extract.epoch",
                &[
                    &seed.to_le_bytes(),
                    relation.as_bytes(),
                    &(epoch as u64).to_le_bytes(),
                ],
            );
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let scale = 1.0 / batch.len() as f64;
                for &idx in batch {
                    let example = group[idx];
                    let (loss, tape) =
                        session.forward(example.relation, example.head, example.gold)?;
                    if !loss.is_finite() {
                        return Err(ExtractError::Divergent {
                            relation: relation.to_string(),
                            epoch,
                        });
                    }
                    session.backward(tape, scale)?;
                }
                session.optimizer_step(schedule.lr_at(step), cfg.weight_decay);
                step += 1;
            }
        }
        let accuracy = validate(session.as_ref())?;
        val_trace.push(accuracy);
        if accuracy > best_metric {
            best_metric = accuracy;
            best_prompts = session.export();
        }
    }

    Ok(SoftPromptSet {
        prompts: best_prompts,
        seed,
        selection_metric: best_metric,
        val_trace,
    })
}

/// Score every diagnostic fact and keep those whose gold tail token is
/// ranked first. Deterministic given (backend, prompts, seed).
pub fn extract_knowledge(
    backend: &dyn ModelBackend,
    prompts: &SoftPromptSet,
    diagnostic: &FactSet,
    seed: u64,
) -> Result<KnowledgeSnapshot, ExtractError> {
    for relation in diagnostic.relations() {
        if !prompts.prompts.contains_key(relation) {
            return Err(ExtractError::PromptCoverage(relation.clone()));
        }
    }
    let mut kept = Vec::new();
    for fact in diagnostic.iter() {
        let tokens = backend.tokenize(&fact.tail);
        if tokens.len() != 1 || Some(tokens[0]) == backend.unknown_token() {
            continue;
        }
        let prompt = AssembledPrompt {
            relation: &fact.relation,
            head: &fact.head,
            fact_uid: &fact.uid,
            prompt: prompts.prompts.get(&fact.relation),
        };
        if backend.top1_tail(&prompt)? == tokens[0] {
            kept.push(fact.clone());
        }
    }
    let backend_id = backend.info().id;
    let count = kept.len();
    let facts = FactSet::from_facts(
        kept,
        format!("snapshot(backend={backend_id},seed={seed})"),
    );
    Ok(KnowledgeSnapshot {
        facts,
        extraction_fraction: count as f64 / diagnostic.len().max(1) as f64,
        backend_id,
        seed,
        diagnostic_size: diagnostic.len(),
    })
}

/// On-disk manifest for one extraction stage directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotManifest {
    pub backend_id: String,
    pub extraction_seed: u64,
    pub extraction_fraction: f64,
    pub snapshot_size: usize,
    pub diagnostic_size: usize,
    pub diagnostic_hash: String,
    pub dropped_multi_token_tails: usize,
    pub prompt_selection_metric: f64,
}

pub fn save_snapshot(
    dir: &Path,
    snapshot: &KnowledgeSnapshot,
    prompts: &SoftPromptSet,
    diagnostic_hash: &str,
    dropped: usize,
) -> Result<(), ExtractError> {
    fs::create_dir_all(dir).map_err(|source| ExtractError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    crate::kb::save_canonical(&snapshot.facts, &dir.join("facts.jsonl"))?;
    let manifest = SnapshotManifest {
        backend_id: snapshot.backend_id.clone(),
        extraction_seed: snapshot.seed,
        extraction_fraction: snapshot.extraction_fraction,
        snapshot_size: snapshot.facts.len(),
        diagnostic_size: snapshot.diagnostic_size,
        diagnostic_hash: diagnostic_hash.to_string(),
        dropped_multi_token_tails: dropped,
        prompt_selection_metric: prompts.selection_metric,
    };
    for (name, json) in [
        ("snapshot_manifest.json", serde_json::to_string_pretty(&manifest).unwrap()),
        ("prompts.json", serde_json::to_string(&prompts).unwrap()),
    ] {
        let path = dir.join(name);
        fs::write(&path, json).map_err(|source| ExtractError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

pub fn load_snapshot(dir: &Path) -> Result<(KnowledgeSnapshot, SnapshotManifest), ExtractError> {
    let manifest_path = dir.join("snapshot_manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|source| ExtractError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let manifest: SnapshotManifest =
        serde_json::from_str(&text).map_err(|e| ExtractError::Manifest(e.to_string()))?;
    let facts = crate::kb::load_canonical(&dir.join("facts.jsonl"))?;
    if facts.len() != manifest.snapshot_size {
        return Err(ExtractError::Manifest(format!(
            "facts.jsonl has {} records but the manifest says {}",
            facts.len(),
            manifest.snapshot_size
        )));
    }
    let snapshot = KnowledgeSnapshot {
        facts,
        extraction_fraction: manifest.snapshot_size as f64 / manifest.diagnostic_size.max(1) as f64,
        backend_id: manifest.backend_id.clone(),
        seed: manifest.extraction_seed,
        diagnostic_size: manifest.diagnostic_size,
    };
    Ok((snapshot, manifest))
}

pub fn load_prompts(dir: &Path) -> Result<SoftPromptSet, ExtractError> {
    let path = dir.join("prompts.json");
    let text = fs::read_to_string(&path).map_err(|source| ExtractError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ExtractError::Manifest(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::oracle::OracleBackend;
    use crate::kb::synthetic::{generate, SyntheticSpec};
    use crate::kb::parse_tsv;

    fn diagnostic(n_rel: usize, per_rel: usize, seed: u64) -> FactSet {
        generate(&SyntheticSpec {
            relations: n_rel,
            facts_per_relation: per_rel,
            head_pool: per_rel * 3,
            tails_per_relation: 10,
            seed,
        })
    }

    fn oracle_prompts(backend: &OracleBackend, facts: &FactSet, seed: u64) -> SoftPromptSet {
        let (train, val) = stratified_split(facts, 0.1, seed);
        train_soft_prompts(backend, &train, &val, &ExtractionConfig::default(), seed).unwrap()
    }

    #[test]
    fn oracle_full_knowledge_extracts_everything() {
        let facts = diagnostic(4, 30, 1);
        let backend = OracleBackend::new(&facts, 1.0, 0.5, 9);
        let prompts = oracle_prompts(&backend, &facts, 9);
        assert!((prompts.selection_metric - 1.0).abs() < 1e-12);
        let snapshot = extract_knowledge(&backend, &prompts, &facts, 9).unwrap();
        assert_eq!(snapshot.facts.len(), facts.len());
        assert!((snapshot.extraction_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_knowledge_rate_concentrates() {
        let facts = diagnostic(8, 250, 2);
        for seed in [1u64, 2, 3] {
            let backend = OracleBackend::new(&facts, 0.34, 0.5, seed);
            let prompts = oracle_prompts(&backend, &facts, seed);
            let snapshot = extract_knowledge(&backend, &prompts, &facts, seed).unwrap();
            // 4-sigma binomial bound at n = 2000.
            assert!(
                (snapshot.extraction_fraction - 0.34).abs() < 0.045,
                "seed {seed}: fraction {}",
                snapshot.extraction_fraction
            );
        }
    }

    #[test]
    fn snapshot_contains_exactly_known_facts() {
        let facts = parse_tsv("a\tr\tx\nb\tr\ty\nc\tr\tz\nd\tr\tw\n", "t").unwrap();
        let backend = OracleBackend::new(&facts, 0.5, 0.5, 4);
        let prompts = oracle_prompts(&backend, &facts, 4);
        let snapshot = extract_knowledge(&backend, &prompts, &facts, 4).unwrap();
        for fact in facts.iter() {
            assert_eq!(snapshot.facts.contains(&fact.uid), backend.knows(&fact.uid));
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let facts = diagnostic(3, 40, 5);
        let backend = OracleBackend::new(&facts, 0.6, 0.5, 2);
        let prompts = oracle_prompts(&backend, &facts, 2);
        let a = extract_knowledge(&backend, &prompts, &facts, 2).unwrap();
        let b = extract_knowledge(&backend, &prompts, &facts, 2).unwrap();
        assert_eq!(a.facts.facts(), b.facts.facts());
    }

    #[test]
    fn snapshot_is_subset_of_diagnostic() {
        let facts = diagnostic(3, 40, 6);
        let backend = OracleBackend::new(&facts, 0.4, 0.5, 3);
        let prompts = oracle_prompts(&backend, &facts, 3);
        let snapshot = extract_knowledge(&backend, &prompts, &facts, 3).unwrap();
        for fact in snapshot.facts.iter() {
            assert!(facts.contains(&fact.uid));
        }
    }

    #[test]
    fn val_relation_missing_from_train_is_an_error() {
        let train = parse_tsv("a\tr1\tx\n", "t").unwrap();
        let val = parse_tsv("b\tr2\ty\n", "v").unwrap();
        let backend = OracleBackend::new(&train, 1.0, 0.5, 0);
        let err =
            train_soft_prompts(&backend, &train, &val, &ExtractionConfig::default(), 0)
                .unwrap_err();
        assert!(matches!(err, ExtractError::ValRelationMissing(r) if r == "r2"));
    }

    #[test]
    fn missing_prompt_coverage_is_an_error() {
        let facts = parse_tsv("a\tr1\tx\nb\tr2\ty\n", "t").unwrap();
        let partial = parse_tsv("a\tr1\tx\n", "t").unwrap();
        let backend = OracleBackend::new(&facts, 1.0, 0.5, 0);
        let prompts = oracle_prompts(&backend, &partial, 0);
        let err = extract_knowledge(&backend, &prompts, &facts, 0).unwrap_err();
        assert!(matches!(err, ExtractError::PromptCoverage(r) if r == "r2"));
    }

    #[test]
    fn snapshot_round_trips_through_disk() {
        let facts = diagnostic(3, 20, 7);
        let backend = OracleBackend::new(&facts, 0.5, 0.5, 1);
        let prompts = oracle_prompts(&backend, &facts, 1);
        let snapshot = extract_knowledge(&backend, &prompts, &facts, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_snapshot(dir.path(), &snapshot, &prompts, &facts.content_hash(), 0).unwrap();
        let (loaded, manifest) = load_snapshot(dir.path()).unwrap();
        assert_eq!(loaded.facts.facts(), snapshot.facts.facts());
        assert_eq!(manifest.diagnostic_size, facts.len());
        assert!((loaded.extraction_fraction - snapshot.extraction_fraction).abs() < 1e-12);
    }

    #[test]
    fn config_defaults_match_extraction_stage_table() {
        let cfg = ExtractionConfig::default();
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.weight_decay, 0.0);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.warmup_fraction, 0.06);
    }

    #[test]
    fn prompt_training_improves_over_untrained_baseline() {
        use crate::backend::tiny::{TinyBackend, TinySpec};
        use crate::backend::ArchitectureKind;
        // One relation, 20 train facts; heads shared with a second relation
        // would be irrelevant here since only prompt quality is probed.
        let mut lines = String::new();
        for i in 0..25 {
            lines.push_str(&format!("p{i:02}\tBornIn\tc{:02}\n", i % 6));
        }
        let facts = parse_tsv(&lines, "prompt-fixture").unwrap();
        let spec = TinySpec {
            arch: ArchitectureKind::EncoderMasked,
            dim: 24,
            ff: 48,
            layers: 2,
            heads: 4,
            context: 48,
            pretrain_epochs: 80,
            pretrain_batch: 8,
            pretrain_lr: 3e-3,
            pretrain_seed: 5,
        };
        let backend = TinyBackend::create(&spec, &facts, None).unwrap();
        let (train, val) = stratified_split(&facts, 0.2, 1);
        assert!(train.len() >= 20);
        let cfg = ExtractionConfig {
            learning_rate: 0.02,
            batch_size: 8,
            ..ExtractionConfig::default()
        };
        let prompts = train_soft_prompts(&backend, &train, &val, &cfg, 1).unwrap();
        let baseline = prompts.val_trace[0];
        assert!(
            prompts.selection_metric > baseline,
            "no improvement: baseline {baseline}, best {}",
            prompts.selection_metric
        );
    }

    #[test]
    fn stratified_split_is_disjoint_and_covers() {
        let facts = diagnostic(5, 30, 8);
        let (train, val) = stratified_split(&facts, 0.1, 3);
        assert_eq!(train.len() + val.len(), facts.len());
        for fact in val.iter() {
            assert!(!train.contains(&fact.uid));
            assert!(train.relations().contains(&fact.relation));
        }
    }
}
