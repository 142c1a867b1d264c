//! Task construction: the stochastic document generator and the assembly of
//! training/evaluation retrieval instances from a knowledge snapshot.
//!
//! Queries render a fact with the tail elided. The gold document renders the
//! full triple; negatives re-render it with one or more slots replaced by
//! entities sampled from the snapshot's own pools, so the only stable signal
//! linking a query to its gold document is the fact itself.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::templates::{relation_phrase, Template, TemplateError, TemplatePack};

use crate::extract::KnowledgeSnapshot;
use crate::kb::{EntityPools, Fact, FactSet, FactUid};
use crate::seeding::stream_rng;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("degenerate pool: no non-gold {slot} available for relation {relation:?}")]
    DegeneratePool { slot: &'static str, relation: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("OOD split impossible: {0}")]
    SplitImpossible(String),
    #[error("split produced an empty {0} side")]
    EmptySide(&'static str),
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("snapshot too small to split: {0} facts")]
    TooSmall(usize),
    #[error("malformed instance record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Document type: which of the (head, relation, tail) slots keep their gold
/// value versus being randomized, plus the factually-correct-but-unrelated
/// kind drawn from other test facts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DocType {
    #[serde(rename = "gold")]
    Gold,
    /// (h, r, ·) — tail randomized; the hardest distractor family.
    #[serde(rename = "h_r_*")]
    RandomTail,
    /// (·, r, t) — head randomized.
    #[serde(rename = "*_r_t")]
    RandomHead,
    /// (h, ·, t) — relation randomized.
    #[serde(rename = "h_*_t")]
    RandomRelation,
    /// (h, ·, ·) — only the head is gold.
    #[serde(rename = "h_*_*")]
    HeadOnly,
    /// (·, r, ·) — only the relation is gold.
    #[serde(rename = "*_r_*")]
    RelationOnly,
    /// (·, ·, t) — only the tail is gold.
    #[serde(rename = "*_*_t")]
    TailOnly,
    /// (·, ·, ·) — every slot randomized (not factual).
    #[serde(rename = "*_*_*")]
    FullyRandom,
    /// A different fact's gold triple: factually correct, unrelated.
    #[serde(rename = "unrelated_true")]
    UnrelatedTrue,
}

impl DocType {
    /// Randomized flags as (head, relation, tail); `None` for unrelated-true
    /// documents, whose slots carry a foreign fact rather than edits of the
    /// gold one.
    pub fn randomized_slots(self) -> Option<[bool; 3]> {
        match self {
            DocType::Gold => Some([false, false, false]),
            DocType::RandomTail => Some([false, false, true]),
            DocType::RandomHead => Some([true, false, false]),
            DocType::RandomRelation => Some([false, true, false]),
            DocType::HeadOnly => Some([false, true, true]),
            DocType::RelationOnly => Some([true, false, true]),
            DocType::TailOnly => Some([true, true, false]),
            DocType::FullyRandom => Some([true, true, true]),
            DocType::UnrelatedTrue => None,
        }
    }

    /// The three hard training negative types: they differ from the gold
    /// document in exactly one slot.
    pub fn training_negatives() -> [DocType; 3] {
        [DocType::RandomTail, DocType::RandomHead, DocType::RandomRelation]
    }

    /// Default inference distractor roster: every non-gold slot pattern,
    /// with unrelated-true documents handled by their own count knob.
    pub fn default_inference_types() -> Vec<DocType> {
        vec![
            DocType::RandomTail,
            DocType::RandomHead,
            DocType::RandomRelation,
            DocType::HeadOnly,
            DocType::RelationOnly,
            DocType::TailOnly,
        ]
    }
}

/// How one slot of a document was filled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotFill {
    Gold(String),
    Randomized(String),
}

impl SlotFill {
    pub fn value(&self) -> &str {
        match self {
            SlotFill::Gold(v) | SlotFill::Randomized(v) => v,
        }
    }

    pub fn is_randomized(&self) -> bool {
        matches!(self, SlotFill::Randomized(_))
    }
}

/// Record of the sampled template and slot fills behind a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitutions {
    pub head: SlotFill,
    pub relation: SlotFill,
    pub tail: SlotFill,
    /// Relation whose template rendered the text (differs from the fact's
    /// relation when the relation slot is randomized).
    pub template_relation: String,
    pub template_variant: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub doc_type: DocType,
    pub fact_uid: FactUid,
    pub substitutions: Substitutions,
}

/// One retrieval task item: a tail-less query, its gold document, and the
/// distractor battery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalInstance {
    pub fact_uid: FactUid,
    pub query: String,
    pub gold: Document,
    pub negatives: Vec<Document>,
}

impl RetrievalInstance {
    pub fn candidate_count(&self) -> usize {
        1 + self.negatives.len()
    }

    /// Relation of the originating fact, read off the gold document.
    pub fn relation(&self) -> &str {
        self.gold.substitutions.relation.value()
    }
}

/// Generation knobs. Training negatives are fixed to the three hard types;
/// the inference roster is a configurable mask over non-gold types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskGenConfig {
    pub negatives_per_type: usize,
    pub eval_samples_per_type: usize,
    pub unrelated_true_count: usize,
    pub inference_types: Vec<DocType>,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        TaskGenConfig {
            negatives_per_type: 4,
            eval_samples_per_type: 50,
            unrelated_true_count: 50,
            inference_types: DocType::default_inference_types(),
        }
    }
}

fn sample_excluding<'a>(
    pool: &'a [String],
    exclude: &str,
    rng: &mut ChaCha20Rng,
    slot: &'static str,
    relation: &str,
) -> Result<&'a str, TaskError> {
    // Pools are sorted and deduplicated, so the excluded entry (if present)
    // can be skipped by index instead of scanning.
    let exclude_idx = pool.binary_search_by(|e| e.as_str().cmp(exclude)).ok();
    let effective = pool.len() - usize::from(exclude_idx.is_some());
    if effective == 0 {
        return Err(TaskError::DegeneratePool {
            slot,
            relation: relation.to_string(),
        });
    }
    let mut idx = rng.gen_range(0..effective);
    if let Some(excluded) = exclude_idx {
        if idx >= excluded {
            idx += 1;
        }
    }
    Ok(pool[idx].as_str())
}

fn pick_template<'a>(
    pack: &'a TemplatePack,
    relation: &str,
    rng: &mut ChaCha20Rng,
) -> Result<&'a Template, TaskError> {
    let templates = pack.templates(relation);
    if templates.is_empty() {
        return Err(TaskError::Template(TemplateError::UncoveredRelation(
            relation.to_string(),
        )));
    }
    Ok(&templates[rng.gen_range(0..templates.len())])
}

/// Render one document for `fact` under `doc_type`. Gold slots are filled
/// verbatim; randomized slots sample uniformly from the same-slot pool of
/// the snapshot, excluding the gold entity. For `UnrelatedTrue`, pass the
/// foreign fact as `fact`: its gold triple is rendered under a freshly
/// sampled template.
pub fn generate_document(
    pack: &TemplatePack,
    pools: &EntityPools,
    fact: &Fact,
    doc_type: DocType,
    rng: &mut ChaCha20Rng,
) -> Result<Document, TaskError> {
    let (rand_head, rand_relation, rand_tail) = match doc_type.randomized_slots() {
        Some([h, r, t]) => (h, r, t),
        None => (false, false, false), // unrelated-true renders its own gold triple
    };

    // Sampling order is fixed: relation, template, head, tail.
    let doc_relation: String = if rand_relation {
        let relations = &pools.all_relations;
        let effective = relations.len() - usize::from(relations.contains(&fact.relation));
        if effective == 0 {
            return Err(TaskError::DegeneratePool {
                slot: "relation",
                relation: fact.relation.clone(),
            });
        }
        let pick = rng.gen_range(0..effective);
        relations
            .iter()
            .filter(|r| r.as_str() != fact.relation)
            .nth(pick)
            .expect("index in range")
            .clone()
    } else {
        fact.relation.clone()
    };
    let template = pick_template(pack, &doc_relation, rng)?;

    let head_value: String = if rand_head {
        sample_excluding(pools.heads(&doc_relation), &fact.head, rng, "head", &doc_relation)?
            .to_string()
    } else {
        fact.head.clone()
    };
    let tail_value: String = if rand_tail {
        sample_excluding(pools.tails(&doc_relation), &fact.tail, rng, "tail", &doc_relation)?
            .to_string()
    } else {
        fact.tail.clone()
    };

    let text = template.render(&head_value, &relation_phrase(&doc_relation), &tail_value);
    let wrap = |randomized: bool, value: String| {
        if randomized {
            SlotFill::Randomized(value)
        } else {
            SlotFill::Gold(value)
        }
    };
    Ok(Document {
        text,
        doc_type,
        fact_uid: fact.uid.clone(),
        substitutions: Substitutions {
            head: wrap(rand_head, head_value),
            relation: wrap(rand_relation, doc_relation.clone()),
            tail: wrap(rand_tail, tail_value),
            template_relation: doc_relation,
            template_variant: template.variant,
        },
    })
}

/// Query plus gold document for a fact. Drawn from an epoch-independent
/// stream so the gold side is bit-identical across epochs; the query
/// template is sampled independently of the document template.
fn query_and_gold(
    pack: &TemplatePack,
    pools: &EntityPools,
    fact: &Fact,
    base_seed: u64,
) -> Result<(String, Document), TaskError> {
    let mut rng = stream_rng("task.gold", &[&base_seed.to_le_bytes(), fact.uid.as_bytes()]);
    let query_template = pick_template(pack, &fact.relation, &mut rng)?;
    let query = query_template.render_without_tail(&fact.head, &relation_phrase(&fact.relation));
    let gold = generate_document(pack, pools, fact, DocType::Gold, &mut rng)?;
    Ok((query, gold))
}

/// Training instance: query, gold, and `negatives_per_type` samples of each
/// hard negative type (12 with defaults). Negatives resample per epoch; the
/// gold document does not.
pub fn build_train_instance(
    fact: &Fact,
    cfg: &TaskGenConfig,
    pack: &TemplatePack,
    pools: &EntityPools,
    base_seed: u64,
    epoch: u64,
) -> Result<RetrievalInstance, TaskError> {
    let (query, gold) = query_and_gold(pack, pools, fact, base_seed)?;
    let mut rng = stream_rng(
        "task.negatives",
        &[
            &base_seed.to_le_bytes(),
            fact.uid.as_bytes(),
            &epoch.to_le_bytes(),
        ],
    );
    let mut negatives = Vec::with_capacity(3 * cfg.negatives_per_type);
    for doc_type in DocType::training_negatives() {
        for _ in 0..cfg.negatives_per_type {
            negatives.push(generate_document(pack, pools, fact, doc_type, &mut rng)?);
        }
    }
    Ok(RetrievalInstance {
        fact_uid: fact.uid.clone(),
        query,
        gold,
        negatives,
    })
}

/// Evaluation instance: the full distractor battery. Type (h, r, ·) is
/// enumerated exhaustively over the relation's tail pool; every other active
/// type contributes `eval_samples_per_type` samples; unrelated-true
/// documents are drawn without replacement from the other test facts.
pub fn build_eval_instance(
    fact: &Fact,
    test_facts: &[&Fact],
    cfg: &TaskGenConfig,
    pack: &TemplatePack,
    pools: &EntityPools,
    base_seed: u64,
) -> Result<RetrievalInstance, TaskError> {
    let (query, gold) = query_and_gold(pack, pools, fact, base_seed)?;
    let mut rng = stream_rng("task.eval", &[&base_seed.to_le_bytes(), fact.uid.as_bytes()]);
    let mut negatives = Vec::new();
    for &doc_type in &cfg.inference_types {
        if doc_type == DocType::RandomTail {
            // Enumerate every non-gold tail so a correct top-1 requires the
            // model to actually know the answer.
            let pool = pools.tails(&fact.relation);
            let non_gold: Vec<&String> =
                pool.iter().filter(|t| t.as_str() != fact.tail).collect();
            if non_gold.is_empty() {
                return Err(TaskError::DegeneratePool {
                    slot: "tail",
                    relation: fact.relation.clone(),
                });
            }
            for tail in non_gold {
                let template = pick_template(pack, &fact.relation, &mut rng)?;
                let text =
                    template.render(&fact.head, &relation_phrase(&fact.relation), tail);
                negatives.push(Document {
                    text,
                    doc_type,
                    fact_uid: fact.uid.clone(),
                    substitutions: Substitutions {
                        head: SlotFill::Gold(fact.head.clone()),
                        relation: SlotFill::Gold(fact.relation.clone()),
                        tail: SlotFill::Randomized(tail.clone()),
                        template_relation: fact.relation.clone(),
                        template_variant: template.variant,
                    },
                });
            }
        } else {
            for _ in 0..cfg.eval_samples_per_type {
                negatives.push(generate_document(pack, pools, fact, doc_type, &mut rng)?);
            }
        }
    }
    // Factually correct but unrelated documents from other test facts.
    let mut others: Vec<&Fact> = test_facts
        .iter()
        .copied()
        .filter(|f| f.uid != fact.uid)
        .collect();
    others.shuffle(&mut rng);
    for other in others.into_iter().take(cfg.unrelated_true_count) {
        negatives.push(generate_document(pack, pools, other, DocType::UnrelatedTrue, &mut rng)?);
    }
    Ok(RetrievalInstance {
        fact_uid: fact.uid.clone(),
        query,
        gold,
        negatives,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Iid,
    OodRelation,
}

impl std::str::FromStr for SplitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iid" => Ok(SplitKind::Iid),
            "ood" | "ood_relation" => Ok(SplitKind::OodRelation),
            other => Err(format!("unknown split kind {other:?} (expected iid or ood)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub split_kind: SplitKind,
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<FactUid>,
    pub test: Vec<FactUid>,
}

/// Uniform random partition of the snapshot with |train| = round(ratio·n).
pub fn split_iid(snapshot: &KnowledgeSnapshot, ratio: f64, seed: u64) -> Result<TaskSplit, TaskError> {
    let n = snapshot.facts.len();
    if n < 2 {
        return Err(TaskError::TooSmall(n));
    }
    let mut uids: Vec<FactUid> = snapshot.facts.iter().map(|f| f.uid.clone()).collect();
    let mut rng = stream_rng("split.iid", &[&seed.to_le_bytes()]);
    uids.shuffle(&mut rng);
    let k = ((ratio * n as f64).round() as usize).min(n);
    if k == 0 {
        return Err(TaskError::EmptySide("train"));
    }
    if k == n {
        return Err(TaskError::EmptySide("test"));
    }
    let test = uids.split_off(k);
    Ok(TaskSplit {
        split_kind: SplitKind::Iid,
        seed,
        ratio,
        train: uids,
        test,
    })
}

/// Relation-holdout partition: `ratio` of the relations (by count), with all
/// of their facts, go to train; the remaining relations go to test.
pub fn split_ood_by_relation(
    snapshot: &KnowledgeSnapshot,
    ratio: f64,
    seed: u64,
) -> Result<TaskSplit, TaskError> {
    let relations: Vec<&String> = snapshot.facts.relations().iter().collect();
    if relations.len() < 2 {
        return Err(TaskError::SplitImpossible(format!(
            "need at least 2 relations, snapshot has {}",
            relations.len()
        )));
    }
    let mut shuffled = relations.clone();
    let mut rng = stream_rng("split.ood", &[&seed.to_le_bytes()]);
    shuffled.shuffle(&mut rng);
    let k = ((ratio * relations.len() as f64).round() as usize)
        .clamp(1, relations.len() - 1);
    let train_relations: BTreeSet<&String> = shuffled.iter().take(k).copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for fact in snapshot.facts.iter() {
        if train_relations.contains(&fact.relation) {
            train.push(fact.uid.clone());
        } else {
            test.push(fact.uid.clone());
        }
    }
    Ok(TaskSplit {
        split_kind: SplitKind::OodRelation,
        seed,
        ratio,
        train,
        test,
    })
}

/// Uniform subsample of ⌈fraction·n⌉ snapshot facts, preserving order. The
/// extraction fraction is recomputed against the original diagnostic size.
pub fn subsample_snapshot(
    snapshot: &KnowledgeSnapshot,
    fraction: f64,
    seed: u64,
) -> Result<KnowledgeSnapshot, TaskError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TaskError::InvalidFraction(fraction));
    }
    if (fraction - 1.0).abs() < f64::EPSILON {
        return Ok(snapshot.clone());
    }
    let n = snapshot.facts.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng("snapshot.subsample", &[&seed.to_le_bytes()]);
    indices.shuffle(&mut rng);
    let mut chosen: Vec<usize> = indices.into_iter().take(k).collect();
    chosen.sort_unstable();
    let facts = FactSet::from_facts(
        chosen.iter().map(|&i| snapshot.facts.facts()[i].clone()),
        format!("{} [subsample {fraction}]", snapshot.facts.source),
    );
    Ok(KnowledgeSnapshot {
        extraction_fraction: k as f64 / snapshot.diagnostic_size.max(1) as f64,
        facts,
        backend_id: snapshot.backend_id.clone(),
        seed: snapshot.seed,
        diagnostic_size: snapshot.diagnostic_size,
    })
}

pub fn write_instances<W: Write>(
    instances: &[RetrievalInstance],
    mut out: W,
) -> std::io::Result<()> {
    for instance in instances {
        serde_json::to_writer(&mut out, instance)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse an instance file, verifying each record has a gold-typed gold
/// document and well-formed negatives.
pub fn parse_instances(input: &str) -> Result<Vec<RetrievalInstance>, TaskError> {
    let mut instances = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let instance: RetrievalInstance =
            serde_json::from_str(line).map_err(|e| TaskError::Malformed {
                line: line_no,
                reason: e.to_string(),
            })?;
        if instance.gold.doc_type != DocType::Gold {
            return Err(TaskError::Malformed {
                line: line_no,
                reason: format!("gold document has type {:?}", instance.gold.doc_type),
            });
        }
        if instance.gold.fact_uid != instance.fact_uid {
            return Err(TaskError::Malformed {
                line: line_no,
                reason: "gold document does not belong to the instance fact".into(),
            });
        }
        instances.push(instance);
    }
    Ok(instances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{build_entity_pools, parse_tsv};

    fn fixture() -> (FactSet, EntityPools, TemplatePack) {
        let facts = parse_tsv(
            "Barack Obama\tGraduatedFrom\tHarvard\n\
             Ada\tGraduatedFrom\tCambridge\n\
             Grace\tGraduatedFrom\tYale\n\
             Paris\tCapitalOf\tFrance\n\
             Madrid\tCapitalOf\tSpain\n\
             Rome\tCapitalOf\tItaly\n",
            "fixture",
        )
        .unwrap();
        let pools = build_entity_pools(&facts).unwrap();
        let pack = TemplatePack::default_for_relations(facts.relations());
        (facts, pools, pack)
    }

    fn snapshot_of(facts: &FactSet) -> KnowledgeSnapshot {
        KnowledgeSnapshot {
            facts: facts.clone(),
            extraction_fraction: 1.0,
            backend_id: "test".into(),
            seed: 0,
            diagnostic_size: facts.len(),
        }
    }

    #[test]
    fn gold_document_contains_all_three_entities() {
        let (facts, pools, pack) = fixture();
        let fact = &facts.facts()[0];
        let mut rng = stream_rng("t", &[b"1"]);
        let doc = generate_document(&pack, &pools, fact, DocType::Gold, &mut rng).unwrap();
        assert!(doc.text.contains("Barack Obama"));
        assert!(doc.text.contains("graduated from"));
        assert!(doc.text.contains("Harvard"));
        assert!(!doc.substitutions.head.is_randomized());
    }

    #[test]
    fn random_tail_keeps_head_and_relation() {
        let (facts, pools, pack) = fixture();
        let fact = &facts.facts()[0];
        let mut rng = stream_rng("t", &[b"2"]);
        let doc = generate_document(&pack, &pools, fact, DocType::RandomTail, &mut rng).unwrap();
        assert_eq!(doc.substitutions.head.value(), "Barack Obama");
        assert_eq!(doc.substitutions.relation.value(), "GraduatedFrom");
        assert!(doc.substitutions.tail.is_randomized());
        assert_ne!(doc.substitutions.tail.value(), "Harvard");
        assert!(["Cambridge", "Yale"].contains(&doc.substitutions.tail.value()));
    }

    #[test]
    fn generation_is_deterministic_given_seed() {
        let (facts, pools, pack) = fixture();
        let fact = &facts.facts()[2];
        let mut a = stream_rng("t", &[b"3"]);
        let mut b = stream_rng("t", &[b"3"]);
        let doc_a = generate_document(&pack, &pools, fact, DocType::HeadOnly, &mut a).unwrap();
        let doc_b = generate_document(&pack, &pools, fact, DocType::HeadOnly, &mut b).unwrap();
        assert_eq!(doc_a, doc_b);
    }

    #[test]
    fn degenerate_pool_is_an_error() {
        let facts = parse_tsv("a\tr1\tx\nb\tr2\ty\n", "two").unwrap();
        let pools = build_entity_pools(&facts).unwrap();
        let pack = TemplatePack::default_for_relations(facts.relations());
        let fact = &facts.facts()[0];
        let mut rng = stream_rng("t", &[b"4"]);
        // Only one head exists for r1, so (·, r, t) cannot be built.
        let err =
            generate_document(&pack, &pools, fact, DocType::RandomHead, &mut rng).unwrap_err();
        assert!(matches!(err, TaskError::DegeneratePool { slot: "head", .. }));
    }

    #[test]
    fn train_instance_negative_counts() {
        let (facts, pools, pack) = fixture();
        let fact = &facts.facts()[0];
        for (per_type, total) in [(4usize, 12usize), (2, 6), (10, 30)] {
            let cfg = TaskGenConfig {
                negatives_per_type: per_type,
                ..TaskGenConfig::default()
            };
            let instance = build_train_instance(fact, &cfg, &pack, &pools, 11, 0).unwrap();
            assert_eq!(instance.negatives.len(), total);
            for doc_type in DocType::training_negatives() {
                assert_eq!(
                    instance.negatives.iter().filter(|d| d.doc_type == doc_type).count(),
                    per_type
                );
            }
        }
    }

    #[test]
    fn epoch_changes_negatives_but_never_gold() {
        let (facts, pools, pack) = fixture();
        let fact = &facts.facts()[0];
        let cfg = TaskGenConfig::default();
        let epoch0 = build_train_instance(fact, &cfg, &pack, &pools, 11, 0).unwrap();
        let epoch1 = build_train_instance(fact, &cfg, &pack, &pools, 11, 1).unwrap();
        assert_eq!(epoch0.query, epoch1.query);
        assert_eq!(epoch0.gold, epoch1.gold);
        assert_ne!(epoch0.negatives, epoch1.negatives);
        let again = build_train_instance(fact, &cfg, &pack, &pools, 11, 0).unwrap();
        assert_eq!(epoch0, again);
    }

    #[test]
    fn query_has_no_tail() {
        let (facts, pools, pack) = fixture();
        let fact = &facts.facts()[3];
        let cfg = TaskGenConfig::default();
        let instance = build_train_instance(fact, &cfg, &pack, &pools, 11, 0).unwrap();
        assert!(instance.query.contains("Paris"));
        assert!(!instance.query.contains("France"));
    }

    #[test]
    fn eval_instance_enumerates_random_tail_and_counts_types() {
        // One relation with exactly 4 tails for enumeration (3 non-gold),
        // a second relation so relation randomization works.
        let mut lines = String::new();
        for i in 0..8 {
            lines.push_str(&format!("h{i}\tr1\tt{}\n", i % 4));
        }
        for i in 0..8 {
            lines.push_str(&format!("g{i}\tr2\tu{}\n", i % 4));
        }
        let facts = parse_tsv(&lines, "eval").unwrap();
        let pools = build_entity_pools(&facts).unwrap();
        let pack = TemplatePack::default_for_relations(facts.relations());
        let cfg = TaskGenConfig {
            eval_samples_per_type: 5,
            unrelated_true_count: 3,
            ..TaskGenConfig::default()
        };
        let test_facts: Vec<&Fact> = facts.iter().collect();
        let fact = test_facts[0];
        let instance =
            build_eval_instance(fact, &test_facts, &cfg, &pack, &pools, 11).unwrap();
        let count = |t: DocType| instance.negatives.iter().filter(|d| d.doc_type == t).count();
        assert_eq!(count(DocType::RandomTail), 3); // enumerated: 4 tails - gold
        for t in [
            DocType::RandomHead,
            DocType::RandomRelation,
            DocType::HeadOnly,
            DocType::RelationOnly,
            DocType::TailOnly,
        ] {
            assert_eq!(count(t), 5);
        }
        assert_eq!(count(DocType::UnrelatedTrue), 3);
        assert_eq!(count(DocType::Gold), 0);
        // Gold present exactly once, as the dedicated field.
        assert_eq!(instance.gold.doc_type, DocType::Gold);
        // Unrelated documents are other facts' gold renderings.
        for doc in instance.negatives.iter().filter(|d| d.doc_type == DocType::UnrelatedTrue) {
            assert_ne!(doc.fact_uid, instance.fact_uid);
            assert!(!doc.substitutions.head.is_randomized());
        }
    }

    #[test]
    fn iid_split_contracts() {
        let (facts, _, _) = fixture();
        let snapshot = snapshot_of(&facts);
        let split = split_iid(&snapshot, 0.6, 42).unwrap();
        assert_eq!(split.train.len(), 4); // round(0.6 * 6)
        assert_eq!(split.test.len(), 2);
        let all: BTreeSet<_> = split.train.iter().chain(&split.test).collect();
        assert_eq!(all.len(), 6);
        let again = split_iid(&snapshot, 0.6, 42).unwrap();
        assert_eq!(split, again);
        assert_ne!(split_iid(&snapshot, 0.6, 43).unwrap().train, split.train);
    }

    #[test]
    fn ood_split_relations_disjoint() {
        let mut lines = String::new();
        for r in 0..5 {
            for i in 0..4 {
                lines.push_str(&format!("h{r}x{i}\trel{r}\tt{r}x{i}\n"));
            }
        }
        let facts = parse_tsv(&lines, "ood").unwrap();
        let snapshot = snapshot_of(&facts);
        let split = split_ood_by_relation(&snapshot, 0.6, 7).unwrap();
        let rel_of = |uid: &FactUid| facts.get(uid).unwrap().relation.clone();
        let train_rels: BTreeSet<String> = split.train.iter().map(&rel_of).collect();
        let test_rels: BTreeSet<String> = split.test.iter().map(rel_of).collect();
        assert_eq!(train_rels.len(), 3); // round(0.6 * 5)
        assert_eq!(test_rels.len(), 2);
        assert!(train_rels.is_disjoint(&test_rels));
        assert_eq!(split.train.len() + split.test.len(), facts.len());
    }

    #[test]
    fn ood_seeds_produce_distinct_relation_partitions() {
        let mut lines = String::new();
        for r in 0..5 {
            for i in 0..4 {
                lines.push_str(&format!("h{r}x{i}\trel{r}\tt{r}x{i}\n"));
            }
        }
        let facts = parse_tsv(&lines, "ood-seeds").unwrap();
        let snapshot = snapshot_of(&facts);
        let partitions: BTreeSet<Vec<FactUid>> = (1..=3)
            .map(|seed| {
                let mut train = split_ood_by_relation(&snapshot, 0.6, seed).unwrap().train;
                train.sort();
                train
            })
            .collect();
        assert_eq!(partitions.len(), 3);
    }

    #[test]
    fn ood_split_single_relation_impossible() {
        let facts = parse_tsv("a\tr\tx\nb\tr\ty\n", "one").unwrap();
        let snapshot = snapshot_of(&facts);
        assert!(matches!(
            split_ood_by_relation(&snapshot, 0.6, 1),
            Err(TaskError::SplitImpossible(_))
        ));
    }

    #[test]
    fn subsample_contracts() {
        let (facts, _, _) = fixture();
        let snapshot = snapshot_of(&facts);
        let identity = subsample_snapshot(&snapshot, 1.0, 3).unwrap();
        assert_eq!(identity.facts.facts(), snapshot.facts.facts());
        let half = subsample_snapshot(&snapshot, 0.5, 3).unwrap();
        assert_eq!(half.facts.len(), 3);
        for fact in half.facts.iter() {
            assert!(snapshot.facts.contains(&fact.uid));
        }
        assert!((half.extraction_fraction - 0.5).abs() < 1e-12);
        assert!(subsample_snapshot(&snapshot, 0.0, 3).is_err());
        assert!(subsample_snapshot(&snapshot, 1.5, 3).is_err());
    }

    #[test]
    fn instances_round_trip_through_jsonl() {
        let (facts, pools, pack) = fixture();
        let cfg = TaskGenConfig::default();
        let instances: Vec<RetrievalInstance> = facts
            .iter()
            .map(|f| build_train_instance(f, &cfg, &pack, &pools, 11, 0).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_instances(&instances, &mut buf).unwrap();
        let parsed = parse_instances(&String::from_utf8(buf).unwrap()).unwrap();
        assert_eq!(instances, parsed);
    }

    #[test]
    fn parse_rejects_wrong_gold_type() {
        let (facts, pools, pack) = fixture();
        let cfg = TaskGenConfig::default();
        let instance =
            build_train_instance(&facts.facts()[0], &cfg, &pack, &pools, 11, 0).unwrap();
        let json = serde_json::to_string(&instance)
            .unwrap()
            .replacen("\"doc_type\":\"gold\"", "\"doc_type\":\"h_r_*\"", 1);
        assert!(parse_instances(&json).is_err());
    }
}
