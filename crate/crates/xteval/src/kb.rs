//! Diagnostic fact base: encyclopedic triples, ingestion, and entity pools.
//!
//! A [`Fact`] is one ⟨head, relation, tail⟩ triple. A [`FactSet`] is an
//! ordered, uid-deduplicated collection of facts, loadable from LAMA-style
//! JSONL or plain TSV and persisted in a canonical JSONL form. Entity pools
//! index heads and tails per relation for slot randomization downstream.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::ModelBackend;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("no facts loaded")]
    Empty,
    #[error("empty fact set: {0}")]
    EmptyInput(String),
    #[error("uid mismatch at line {line}: file says {found}, triple hashes to {expected}")]
    UidMismatch {
        line: usize,
        found: String,
        expected: String,
    },
}

/// Stable identifier of a normalized triple: same triple, same uid.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FactUid(String);

impl FactUid {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl fmt::Display for FactUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Trim and collapse internal whitespace runs to single spaces.
/// Case is preserved: entity surface forms are meaningful.
pub fn normalize_surface(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn triple_uid(head: &str, relation: &str, tail: &str) -> FactUid {
    let mut hasher = Sha256::new();
    for part in [head, relation, tail] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(16);
    for byte in &digest[..8] {
        hex.push_str(&format!("{byte:02x}"));
    }
    FactUid(hex)
}

/// One encyclopedic ⟨head, relation, tail⟩ triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub uid: FactUid,
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Fact {
    /// Normalizes the three fields and derives the uid. Errors if any field
    /// is empty after normalization.
    pub fn new(head: &str, relation: &str, tail: &str) -> Result<Self, String> {
        let head = normalize_surface(head);
        let relation = normalize_surface(relation);
        let tail = normalize_surface(tail);
        for (name, value) in [("head", &head), ("relation", &relation), ("tail", &tail)] {
            if value.is_empty() {
                return Err(format!("empty {name} after whitespace normalization"));
            }
        }
        let uid = triple_uid(&head, &relation, &tail);
        Ok(Fact {
            uid,
            head,
            relation,
            tail,
        })
    }
}

/// Ordered, uid-deduplicated fact collection with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactSet {
    facts: Vec<Fact>,
    relations: BTreeSet<String>,
    pub source: String,
}

impl FactSet {
    /// Build from an iterator, dropping duplicate uids and preserving
    /// first-seen order.
    pub fn from_facts<I: IntoIterator<Item = Fact>>(facts: I, source: impl Into<String>) -> Self {
        let mut seen = HashMap::new();
        let mut kept = Vec::new();
        let mut relations = BTreeSet::new();
        for fact in facts {
            if seen.insert(fact.uid.clone(), kept.len()).is_none() {
                relations.insert(fact.relation.clone());
                kept.push(fact);
            }
        }
        FactSet {
            facts: kept,
            relations,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Fact> {
        self.facts.iter()
    }

    pub fn relations(&self) -> &BTreeSet<String> {
        &self.relations
    }

    pub fn get(&self, uid: &FactUid) -> Option<&Fact> {
        self.facts.iter().find(|f| &f.uid == uid)
    }

    pub fn contains(&self, uid: &FactUid) -> bool {
        self.facts.iter().any(|f| &f.uid == uid)
    }

    /// Subset by uid, keeping this set's order. Unknown uids are ignored.
    pub fn subset(&self, uids: &BTreeSet<FactUid>, source: impl Into<String>) -> FactSet {
        FactSet::from_facts(
            self.facts.iter().filter(|f| uids.contains(&f.uid)).cloned(),
            source,
        )
    }

    /// Content hash over uids in order; used as a cache key component.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for fact in &self.facts {
            hasher.update(fact.uid.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Input formats understood by [`load_facts`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactFormat {
    LamaJsonl,
    Tsv,
}

impl std::str::FromStr for FactFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lama_jsonl" => Ok(FactFormat::LamaJsonl),
            "tsv" => Ok(FactFormat::Tsv),
            other => Err(format!(
                "unknown fact format {other:?} (expected lama_jsonl or tsv)"
            )),
        }
    }
}

#[derive(Deserialize)]
struct LamaRecord {
    sub_label: String,
    #[serde(alias = "relation")]
    predicate_id: String,
    obj_label: String,
}

/// Parse LAMA-style JSONL: one object per line with `sub_label`,
/// `predicate_id` (or `relation`), and `obj_label`. Extra fields are ignored.
pub fn parse_lama_jsonl(input: &str, source: &str) -> Result<FactSet, KbError> {
    let mut facts = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: LamaRecord = serde_json::from_str(line).map_err(|e| KbError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        let fact = Fact::new(&record.sub_label, &record.predicate_id, &record.obj_label)
            .map_err(|reason| KbError::Malformed {
                line: line_no,
                reason,
            })?;
        facts.push(fact);
    }
    Ok(FactSet::from_facts(facts, source))
}

/// Parse `head <TAB> relation <TAB> tail` lines. Blank lines are skipped.
pub fn parse_tsv(input: &str, source: &str) -> Result<FactSet, KbError> {
    let mut facts = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(KbError::Malformed {
                line: line_no,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let fact =
            Fact::new(fields[0], fields[1], fields[2]).map_err(|reason| KbError::Malformed {
                line: line_no,
                reason,
            })?;
        facts.push(fact);
    }
    Ok(FactSet::from_facts(facts, source))
}

/// Canonical on-disk record: `{uid, head, relation, tail}` per line.
#[derive(Serialize, Deserialize)]
struct CanonicalRecord {
    uid: FactUid,
    head: String,
    relation: String,
    tail: String,
}

/// Parse the canonical JSONL form, verifying each stored uid against the
/// recomputed triple hash so tampered or stale files are rejected.
pub fn parse_canonical(input: &str, source: &str) -> Result<FactSet, KbError> {
    let mut facts = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: CanonicalRecord =
            serde_json::from_str(line).map_err(|e| KbError::Malformed {
                line: line_no,
                reason: e.to_string(),
            })?;
        let fact = Fact::new(&record.head, &record.relation, &record.tail).map_err(|reason| {
            KbError::Malformed {
                line: line_no,
                reason,
            }
        })?;
        if fact.uid != record.uid {
            return Err(KbError::UidMismatch {
                line: line_no,
                found: record.uid.as_str().to_string(),
                expected: fact.uid.as_str().to_string(),
            });
        }
        facts.push(fact);
    }
    Ok(FactSet::from_facts(facts, source))
}

/// Load a fact file in the declared format. Errors name the offending line;
/// an empty result is an error.
pub fn load_facts(path: &Path, format: FactFormat) -> Result<FactSet, KbError> {
    let text = fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let source = format!("{}:{:?}", path.display(), format);
    let facts = match format {
        FactFormat::LamaJsonl => parse_lama_jsonl(&text, &source)?,
        FactFormat::Tsv => parse_tsv(&text, &source)?,
    };
    if facts.is_empty() {
        return Err(KbError::Empty);
    }
    Ok(facts)
}

/// Serialize to the canonical JSONL form.
pub fn write_canonical<W: Write>(facts: &FactSet, mut out: W) -> std::io::Result<()> {
    for fact in facts.iter() {
        let record = CanonicalRecord {
            uid: fact.uid.clone(),
            head: fact.head.clone(),
            relation: fact.relation.clone(),
            tail: fact.tail.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_canonical(facts: &FactSet, path: &Path) -> Result<(), KbError> {
    let mut buf = Vec::new();
    write_canonical(facts, &mut buf).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, buf).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_canonical(path: &Path) -> Result<FactSet, KbError> {
    let text = fs::read_to_string(path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_canonical(&text, &path.display().to_string())
}

/// Result of the single-token tail filter.
#[derive(Debug, Clone)]
pub struct TailFilterOutcome {
    pub kept: FactSet,
    pub dropped: usize,
}

/// Retain only facts whose tail maps to exactly one known token under the
/// backend's tokenizer. Tails the tokenizer cannot represent (unknown or
/// multi-token) are dropped and counted; an empty result is allowed but
/// flagged in the provenance label.
pub fn filter_single_token_tails(
    facts: &FactSet,
    backend: &dyn ModelBackend,
) -> TailFilterOutcome {
    let unk = backend.unknown_token();
    let mut kept = Vec::new();
    let mut dropped = 0usize;
    for fact in facts.iter() {
        let tokens = backend.tokenize(&fact.tail);
        let single_known = tokens.len() == 1 && Some(tokens[0]) != unk;
        if single_known {
            kept.push(fact.clone());
        } else {
            dropped += 1;
        }
    }
    let mut source = format!("{} (single-token tails, dropped {dropped})", facts.source);
    if kept.is_empty() {
        source.push_str(" [warning: empty after single-token filter]");
    }
    TailFilterOutcome {
        kept: FactSet::from_facts(kept, source),
        dropped,
    }
}

/// Per-relation head and tail vocabularies, deduplicated and sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPools {
    pub heads_by_relation: BTreeMap<String, Vec<String>>,
    pub tails_by_relation: BTreeMap<String, Vec<String>>,
    pub all_relations: BTreeSet<String>,
}

impl EntityPools {
    pub fn heads(&self, relation: &str) -> &[String] {
        self.heads_by_relation
            .get(relation)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn tails(&self, relation: &str) -> &[String] {
        self.tails_by_relation
            .get(relation)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

/// Build entity pools from a non-empty fact set.
pub fn build_entity_pools(facts: &FactSet) -> Result<EntityPools, KbError> {
    if facts.is_empty() {
        return Err(KbError::EmptyInput(
            "cannot build entity pools from an empty fact set".into(),
        ));
    }
    let mut heads: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut tails: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for fact in facts.iter() {
        heads
            .entry(fact.relation.clone())
            .or_default()
            .insert(fact.head.clone());
        tails
            .entry(fact.relation.clone())
            .or_default()
            .insert(fact.tail.clone());
    }
    Ok(EntityPools {
        heads_by_relation: heads
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect(),
        tails_by_relation: tails
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect(),
        all_relations: facts.relations().clone(),
    })
}

pub mod synthetic {
    //! Seeded synthetic fact generators used by tests and smoke runs.

    use rand::seq::SliceRandom;
    use rand::Rng;

    use super::{Fact, FactSet};
    use crate::seeding::stream_rng;

    /// Shape of a synthetic diagnostic set. Entities are single-word
    /// surface forms so any word-level tokenizer sees one token per tail.
    #[derive(Debug, Clone)]
    pub struct SyntheticSpec {
        pub relations: usize,
        pub facts_per_relation: usize,
        /// Global head vocabulary size; heads are shared across relations.
        pub head_pool: usize,
        /// Tail vocabulary size per relation; bounds distractor enumeration.
        pub tails_per_relation: usize,
        pub seed: u64,
    }

    impl Default for SyntheticSpec {
        fn default() -> Self {
            SyntheticSpec {
                relations: 8,
                facts_per_relation: 25,
                head_pool: 120,
                tails_per_relation: 12,
                seed: 7,
            }
        }
    }

    pub fn generate(spec: &SyntheticSpec) -> FactSet {
        let mut rng = stream_rng("kb.synthetic", &[&spec.seed.to_le_bytes()]);
        let heads: Vec<String> = (0..spec.head_pool).map(|i| format!("ent{i:04}")).collect();
        let mut facts = Vec::new();
        for r in 0..spec.relations {
            let relation = format!("rel{r:02}");
            let tails: Vec<String> = (0..spec.tails_per_relation)
                .map(|i| format!("val{r:02}x{i:03}"))
                .collect();
            // One fact per (head, relation): sample distinct heads.
            let mut pool = heads.clone();
            pool.shuffle(&mut rng);
            let count = spec.facts_per_relation.min(pool.len());
            for head in pool.into_iter().take(count) {
                let tail = &tails[rng.gen_range(0..tails.len())];
                facts.push(Fact::new(&head, &relation, tail).expect("synthetic fact"));
            }
        }
        FactSet::from_facts(facts, format!("synthetic(seed={})", spec.seed))
    }
}
