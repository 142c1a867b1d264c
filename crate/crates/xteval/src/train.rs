//! Cross-encoder finetuning on the training split with the InfoNCE
//! objective: per instance, the gold document competes against the
//! instance's own negatives, which are resampled every epoch while the gold
//! side stays fixed. Checkpoints are selected by validation top-1 retrieval
//! accuracy, the same metric the downstream evaluation reports.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ModelBackend, ModelCheckpoint};
use crate::eval::{gold_rank, scorer_for_checkpoint, EvalError};
use crate::kb::{EntityPools, Fact};
use crate::optim::PolySchedule;
use crate::seeding::stream_rng;
use crate::task::{RetrievalInstance, TaskError, TaskGenConfig, TemplatePack};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at epoch {epoch}, instance {instance}; aborting run")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        instance: String,
    },
    #[error("non-finite score passed to info_nce_loss")]
    NonFiniteInput,
    #[error("info_nce_loss needs at least one negative")]
    NoNegatives,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("training set is empty after the validation holdout")]
    EmptyTrain,
    #[error("backend supports neither gradient finetuning nor inference-only checkpoints")]
    NotTrainable,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Finetuning hyperparameters. Defaults follow the downstream finetuning
/// stage settings: AdamW, lr 1e-5, no weight decay, batch 32, polynomial
/// decay with 6% warmup, 20 epochs. Raising the learning rate or weight
/// decay risks forgetting the pretrained knowledge the task measures, so
/// overrides are logged loudly by the orchestrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rate: 1e-5,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 20,
            warmup_fraction: 0.06,
            validation_fraction: 0.1,
        }
    }
}

impl FinetuneConfig {
    /// Fields that deviate from the stage defaults, for warning banners.
    pub fn overrides(&self) -> Vec<String> {
        let defaults = FinetuneConfig::default();
        let mut out = Vec::new();
        if self.learning_rate > defaults.learning_rate {
            out.push(format!(
                "learning_rate {} above the default {} (risk of forgetting)",
                self.learning_rate, defaults.learning_rate
            ));
        }
        if self.weight_decay != defaults.weight_decay {
            out.push(format!(
                "weight_decay {} instead of 0 (risk of forgetting)",
                self.weight_decay
            ));
        }
        out
    }
}

/// −log( exp(s⁺) / Σ exp(s) ) over the gold score and the instance's own
/// negatives. Always non-negative; exactly ln(m+1) when all scores tie.
pub fn info_nce_loss(gold_score: f64, negative_scores: &[f64]) -> Result<f64, TrainError> {
    let (loss, _, _) = info_nce_grads(gold_score, negative_scores)?;
    Ok(loss)
}

/// Loss plus analytic gradients: d(loss)/d(s⁺) and d(loss)/d(s⁻ᵢ).
pub fn info_nce_grads(
    gold_score: f64,
    negative_scores: &[f64],
) -> Result<(f64, f64, Vec<f64>), TrainError> {
    if negative_scores.is_empty() {
        return Err(TrainError::NoNegatives);
    }
    if !gold_score.is_finite() || negative_scores.iter().any(|s| !s.is_finite()) {
        return Err(TrainError::NonFiniteInput);
    }
    let max = negative_scores
        .iter()
        .fold(gold_score, |acc, &s| acc.max(s));
    let gold_exp = (gold_score - max).exp();
    let mut denom = gold_exp;
    for s in negative_scores {
        denom += (s - max).exp();
    }
    let loss = denom.ln() - (gold_score - max);
    let d_gold = gold_exp / denom - 1.0;
    let d_negs = negative_scores
        .iter()
        .map(|s| (s - max).exp() / denom)
        .collect();
    Ok((loss.max(0.0), d_gold, d_negs))
}

/// Everything needed to (re)generate training instances for any epoch.
pub struct TrainTask<'a> {
    pub facts: Vec<&'a Fact>,
    pub pack: &'a TemplatePack,
    pub pools: &'a EntityPools,
    pub gen: &'a TaskGenConfig,
    pub base_seed: u64,
}

impl TrainTask<'_> {
    pub fn instance(&self, fact: &Fact, epoch: u64) -> Result<RetrievalInstance, TaskError> {
        crate::task::build_train_instance(fact, self.gen, self.pack, self.pools, self.base_seed, epoch)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_accuracy: f64,
}

/// Output of one finetuning run: the selected checkpoint plus its training
/// history. Self-contained for later standalone evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetunedModel {
    pub backend_id: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_trace: Vec<f64>,
    pub epochs: Vec<EpochMetrics>,
    pub config: FinetuneConfig,
    pub checkpoint: ModelCheckpoint,
}

fn validation_accuracy(
    checkpoint_score: &dyn Fn(&str, &str) -> Result<f64, BackendError>,
    instances: &[RetrievalInstance],
) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    for instance in instances {
        let gold_score = checkpoint_score(&instance.query, &instance.gold.text)?;
        let mut negs = Vec::with_capacity(instance.negatives.len());
        for doc in &instance.negatives {
            negs.push((checkpoint_score(&instance.query, &doc.text)?, doc.text.as_str()));
        }
        if gold_rank(gold_score, &instance.gold.text, &negs) == 1 {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len().max(1) as f64)
}

/// Relation-stratified validation holdout over the training facts. At least
/// one fact is held out even for small training sets.
fn validation_split<'a>(
    facts: &[&'a Fact],
    fraction: f64,
    seed: u64,
) -> (Vec<&'a Fact>, Vec<&'a Fact>) {
    let mut by_relation: BTreeMap<&str, Vec<&'a Fact>> = BTreeMap::new();
    for fact in facts {
        by_relation.entry(&fact.relation).or_default().push(fact);
    }
    let mut val_uids = std::collections::BTreeSet::new();
    for (relation, group) in &by_relation {
        let k = ((group.len() as f64) * fraction).floor() as usize;
        if k == 0 {
            continue;
        }
        let mut rng = stream_rng(
            "train.val-split",
            &[&seed.to_le_bytes(), relation.as_bytes()],
        );
        let mut indices: Vec<usize> = (0..group.len()).collect();
        indices.shuffle(&mut rng);
        for &i in indices.iter().take(k) {
            val_uids.insert(group[i].uid.clone());
        }
    }
    if val_uids.is_empty() {
        // Fall back to one fact from the largest relation.
        if let Some(group) = by_relation.values().max_by_key(|g| g.len()) {
            if group.len() > 1 {
                val_uids.insert(group[0].uid.clone());
            }
        }
    }
    let train: Vec<&Fact> = facts
        .iter()
        .filter(|f| !val_uids.contains(&f.uid))
        .copied()
        .collect();
    let val: Vec<&Fact> = facts
        .iter()
        .filter(|f| val_uids.contains(&f.uid))
        .copied()
        .collect();
    (train, val)
}

/// Finetune the backend's cross-encoder on the training facts. For
/// inference-only backends (the oracle) training is a no-op and the returned
/// model wraps the backend's own checkpoint; validation accuracy is still
/// measured on the frozen epoch-0 validation instances.
pub fn finetune(
    backend: &dyn ModelBackend,
    task: &TrainTask,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetunedModel, TrainError> {
    let (train_facts, val_facts) = validation_split(&task.facts, cfg.validation_fraction, seed);
    if val_facts.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    if train_facts.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    // Validation instances are frozen at epoch 0 for comparability.
    let val_instances: Vec<RetrievalInstance> = val_facts
        .iter()
        .map(|f| task.instance(f, 0))
        .collect::<Result<_, _>>()?;
    let backend_id = backend.info().id;

    let Some(mut session) = backend.finetune_session(seed)? else {
        let Some(checkpoint) = backend.inference_checkpoint(seed) else {
            return Err(TrainError::NotTrainable);
        };
        let scorer = scorer_for_checkpoint(&checkpoint)?;
        let mut correct = 0usize;
        for instance in &val_instances {
            let scores = scorer.score_instance(instance)?;
            let negs: Vec<(f64, &str)> = scores[1..]
                .iter()
                .copied()
                .zip(instance.negatives.iter().map(|d| d.text.as_str()))
                .collect();
            if gold_rank(scores[0], &instance.gold.text, &negs) == 1 {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / val_instances.len() as f64;
        return Ok(FinetunedModel {
            backend_id,
            seed,
            best_epoch: 0,
            val_trace: vec![accuracy],
            epochs: vec![EpochMetrics {
                epoch: 0,
                mean_train_loss: 0.0,
                val_accuracy: accuracy,
            }],
            config: cfg.clone(),
            checkpoint,
        });
    };

    let steps_per_epoch = train_facts.len().div_ceil(cfg.batch_size).max(1) as u64;
    let schedule = PolySchedule::new(
        cfg.learning_rate,
        steps_per_epoch * cfg.epochs as u64,
        cfg.warmup_fraction,
    );
    let mut step = 0u64;
    let mut best: Option<(usize, f64, ModelCheckpoint)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut val_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_facts.len()).collect();
        let mut rng = stream_rng(
            "train.order",
            &[&seed.to_le_bytes(), &(epoch as u64).to_le_bytes()],
        );
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let fact = train_facts[idx];
                let instance = task.instance(fact, epoch as u64)?;
                let (gold_score, gold_tape) =
                    session.forward_pair(&instance.query, &instance.gold.text)?;
                let mut neg_scores = Vec::with_capacity(instance.negatives.len());
                let mut neg_tapes = Vec::with_capacity(instance.negatives.len());
                for doc in &instance.negatives {
                    let (score, tape) = session.forward_pair(&instance.query, &doc.text)?;
                    neg_scores.push(score);
                    neg_tapes.push(tape);
                }
                let (loss, d_gold, d_negs) = match info_nce_grads(gold_score, &neg_scores) {
                    Ok(v) => v,
                    Err(_) => {
                        return Err(TrainError::NonFinite {
                            what: "instance loss",
                            epoch,
                            instance: fact.uid.to_string(),
                        })
                    }
                };
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        what: "instance loss",
                        epoch,
                        instance: fact.uid.to_string(),
                    });
                }
                loss_sum += loss;
                loss_count += 1;
                session.backward(gold_tape, d_gold * scale)?;
                for (tape, d) in neg_tapes.into_iter().zip(d_negs) {
                    session.backward(tape, d * scale)?;
                }
            }
            session.optimizer_step(schedule.lr_at(step), cfg.weight_decay);
            step += 1;
        }
        let val_accuracy = validation_accuracy(&|q, d| session.score(q, d), &val_instances)?;
        val_trace.push(val_accuracy);
        epochs.push(EpochMetrics {
            epoch,
            mean_train_loss: loss_sum / loss_count.max(1) as f64,
            val_accuracy,
        });
        let improved = match &best {
            None => true,
            Some((_, best_acc, _)) => val_accuracy > *best_acc,
        };
        if improved {
            best = Some((epoch, val_accuracy, session.checkpoint()));
        }
    }

    let (best_epoch, _, checkpoint) = best.expect("at least one epoch ran");
    Ok(FinetunedModel {
        backend_id,
        seed,
        best_epoch,
        val_trace,
        epochs,
        config: cfg.clone(),
        checkpoint,
    })
}
