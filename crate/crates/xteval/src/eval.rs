//! Retrieval evaluation on the test split and the gap decomposition:
//! usable knowledge = extraction fraction × downstream accuracy,
//! gap 1 = 1 − extraction fraction (facts never acquired),
//! gap 2 = extraction fraction × (1 − accuracy) (acquired but unusable).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ModelCheckpoint};
use crate::seeding::{stream_u64, stream_unit};
use crate::task::RetrievalInstance;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("scorer returned {got} scores for {expected} candidates")]
    ScoreCount { got: usize, expected: usize },
    #[error("non-finite score for instance {0}")]
    NonFiniteScore(String),
    #[error("no reports to aggregate")]
    NoReports,
    #[error("inconsistent backend ids in one aggregation group: {0:?} vs {1:?}")]
    InconsistentBackends(String, String),
    #[error("duplicate seed combination in aggregation: {0:?}")]
    DuplicateCombo(SeedCombo),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Scores a full candidate set: index 0 is the gold document, the rest
/// follow the instance's negative order.
pub trait InstanceScorer {
    fn score_instance(&self, instance: &RetrievalInstance) -> Result<Vec<f64>, EvalError>;
}

/// Rank of the gold document among the candidates, starting at 1.
/// Exact score ties are broken lexicographically on the document text, so
/// the result is invariant to candidate order; a tie on identical text
/// counts against gold.
pub fn gold_rank(gold_score: f64, gold_text: &str, negatives: &[(f64, &str)]) -> usize {
    1 + negatives
        .iter()
        .filter(|(score, text)| {
            *score > gold_score || (*score == gold_score && *text <= gold_text)
        })
        .count()
}

/// Build a scorer from a persisted checkpoint.
pub fn scorer_for_checkpoint(
    checkpoint: &ModelCheckpoint,
) -> Result<Box<dyn InstanceScorer + Send + Sync>, EvalError> {
    match checkpoint {
        ModelCheckpoint::Oracle {
            utilization_rate,
            seed,
            run_seed,
        } => Ok(Box::new(OracleUtilization {
            utilization_rate: *utilization_rate,
            seed: *seed,
            run_seed: *run_seed,
        })),
        ModelCheckpoint::Tiny(ckpt) => Ok(Box::new(TinyPairScorer {
            scorer: ckpt.scorer()?,
        })),
    }
}

/// Oracle utilization behavior: per instance, a seeded draw decides whether
/// the gold document is ranked first (probability `utilization_rate`) or a
/// seeded-random negative wins instead.
pub struct OracleUtilization {
    pub utilization_rate: f64,
    pub seed: u64,
    pub run_seed: u64,
}

impl InstanceScorer for OracleUtilization {
    fn score_instance(&self, instance: &RetrievalInstance) -> Result<Vec<f64>, EvalError> {
        let uid = &instance.fact_uid;
        let draw = stream_unit(
            "oracle.utilization",
            &[
                &self.seed.to_le_bytes(),
                &self.run_seed.to_le_bytes(),
                uid.as_bytes(),
            ],
        );
        let utilized = draw < self.utilization_rate;
        let winner = if utilized || instance.negatives.is_empty() {
            usize::MAX
        } else {
            let pick = stream_u64(
                "oracle.utilization.winner",
                &[
                    &self.seed.to_le_bytes(),
                    &self.run_seed.to_le_bytes(),
                    uid.as_bytes(),
                ],
            );
            (pick % instance.negatives.len() as u64) as usize
        };
        let mut scores = Vec::with_capacity(instance.candidate_count());
        scores.push(1.0);
        for (i, doc) in instance.negatives.iter().enumerate() {
            if i == winner {
                scores.push(2.0);
            } else {
                // Deterministic filler strictly below the gold score.
                scores.push(
                    0.5 * stream_unit(
                        "oracle.utilization.filler",
                        &[
                            &self.seed.to_le_bytes(),
                            &self.run_seed.to_le_bytes(),
                            uid.as_bytes(),
                            doc.text.as_bytes(),
                            &(i as u64).to_le_bytes(),
                        ],
                    ),
                );
            }
        }
        Ok(scores)
    }
}

struct TinyPairScorer {
    scorer: crate::backend::tiny::TinyScorer,
}

impl InstanceScorer for TinyPairScorer {
    fn score_instance(&self, instance: &RetrievalInstance) -> Result<Vec<f64>, EvalError> {
        let mut scores = Vec::with_capacity(instance.candidate_count());
        scores.push(self.scorer.score_pair(&instance.query, &instance.gold.text)?);
        for doc in &instance.negatives {
            scores.push(self.scorer.score_pair(&instance.query, &doc.text)?);
        }
        Ok(scores)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceResult {
    pub fact_uid: crate::kb::FactUid,
    pub relation: String,
    pub gold_rank: usize,
    pub candidates: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RelationAccuracy {
    pub instances: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub accuracy: f64,
    pub instances: usize,
    pub per_relation: BTreeMap<String, RelationAccuracy>,
    pub per_instance: Vec<InstanceResult>,
}

/// Score every candidate of every instance and report top-1 accuracy with a
/// per-relation breakdown.
pub fn evaluate_retrieval(
    scorer: &dyn InstanceScorer,
    instances: &[RetrievalInstance],
) -> Result<RetrievalResult, EvalError> {
    let mut per_instance = Vec::with_capacity(instances.len());
    let mut per_relation: BTreeMap<String, RelationAccuracy> = BTreeMap::new();
    let mut correct_total = 0usize;
    for instance in instances {
        let scores = scorer.score_instance(instance)?;
        if scores.len() != instance.candidate_count() {
            return Err(EvalError::ScoreCount {
                got: scores.len(),
                expected: instance.candidate_count(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(EvalError::NonFiniteScore(instance.fact_uid.to_string()));
        }
        let negs: Vec<(f64, &str)> = scores[1..]
            .iter()
            .copied()
            .zip(instance.negatives.iter().map(|d| d.text.as_str()))
            .collect();
        let rank = gold_rank(scores[0], &instance.gold.text, &negs);
        let relation = instance.relation().to_string();
        let entry = per_relation.entry(relation.clone()).or_default();
        entry.instances += 1;
        if rank == 1 {
            entry.correct += 1;
            correct_total += 1;
        }
        per_instance.push(InstanceResult {
            fact_uid: instance.fact_uid.clone(),
            relation,
            gold_rank: rank,
            candidates: instance.candidate_count(),
        });
    }
    for entry in per_relation.values_mut() {
        entry.accuracy = entry.correct as f64 / entry.instances.max(1) as f64;
    }
    Ok(RetrievalResult {
        accuracy: correct_total as f64 / instances.len().max(1) as f64,
        instances: instances.len(),
        per_relation,
        per_instance,
    })
}

/// The gap decomposition for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub extraction_fraction: f64,
    pub downstream_accuracy: f64,
    pub usable_knowledge: f64,
    pub gap1: f64,
    pub gap2: f64,
}

/// usable = a·u, gap1 = 1 − a, gap2 = a·(1 − u). The three always sum to 1.
pub fn compute_gaps(a: f64, u: f64) -> Result<GapReport, EvalError> {
    if !(0.0..=1.0).contains(&a) || a.is_nan() {
        return Err(EvalError::OutOfRange {
            name: "extraction_fraction",
            value: a,
        });
    }
    if !(0.0..=1.0).contains(&u) || u.is_nan() {
        return Err(EvalError::OutOfRange {
            name: "downstream_accuracy",
            value: u,
        });
    }
    Ok(GapReport {
        extraction_fraction: a,
        downstream_accuracy: u,
        usable_knowledge: a * u,
        gap1: 1.0 - a,
        gap2: a * (1.0 - u),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeedCombo {
    pub extraction: u64,
    pub split: u64,
    pub finetune: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seeds: SeedCombo,
    pub backend_id: String,
    pub gaps: GapReport,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub std: f64,
}

fn stats<I: Iterator<Item = f64> + Clone>(values: I) -> MetricStats {
    let n = values.clone().count();
    if n == 0 {
        return MetricStats::default();
    }
    // Identical values report exactly zero spread.
    let first = values.clone().next().unwrap();
    if values.clone().all(|v| v == first) {
        return MetricStats {
            mean: first,
            std: 0.0,
        };
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    MetricStats {
        mean,
        std: var.sqrt(),
    }
}

/// Seed-grid aggregate: per-metric mean and population standard deviation,
/// with completeness over the (extraction × split × finetune) grid implied
/// by the distinct seeds present.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub backend_id: String,
    pub runs: usize,
    pub expected_runs: usize,
    pub complete: bool,
    pub extraction_fraction: MetricStats,
    pub downstream_accuracy: MetricStats,
    pub usable_knowledge: MetricStats,
    pub gap1: MetricStats,
    pub gap2: MetricStats,
    pub grid: Vec<RunReport>,
}

pub fn aggregate_runs(reports: &[RunReport]) -> Result<RunSummary, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    let backend_id = first.backend_id.clone();
    let mut combos = std::collections::BTreeSet::new();
    let mut extraction_seeds = std::collections::BTreeSet::new();
    let mut split_seeds = std::collections::BTreeSet::new();
    let mut finetune_seeds = std::collections::BTreeSet::new();
    for report in reports {
        if report.backend_id != backend_id {
            return Err(EvalError::InconsistentBackends(
                backend_id,
                report.backend_id.clone(),
            ));
        }
        if !combos.insert(report.seeds) {
            return Err(EvalError::DuplicateCombo(report.seeds));
        }
        extraction_seeds.insert(report.seeds.extraction);
        split_seeds.insert(report.seeds.split);
        finetune_seeds.insert(report.seeds.finetune);
    }
    let expected_runs = extraction_seeds.len() * split_seeds.len() * finetune_seeds.len();
    let mut grid = reports.to_vec();
    grid.sort_by_key(|r| r.seeds);
    Ok(RunSummary {
        backend_id,
        runs: reports.len(),
        expected_runs,
        complete: reports.len() == expected_runs,
        extraction_fraction: stats(grid.iter().map(|r| r.gaps.extraction_fraction)),
        downstream_accuracy: stats(grid.iter().map(|r| r.gaps.downstream_accuracy)),
        usable_knowledge: stats(grid.iter().map(|r| r.gaps.usable_knowledge)),
        gap1: stats(grid.iter().map(|r| r.gaps.gap1)),
        gap2: stats(grid.iter().map(|r| r.gaps.gap2)),
        grid,
    })
}
