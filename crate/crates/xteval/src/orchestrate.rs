//! Run lifecycle: content-addressed stage caching, the extraction × split ×
//! finetune seed grid, ablation sweeps, and report emission.
//!
//! Each stage directory carries a manifest with its input key and output
//! hashes. A stage is skipped on resume only if the key matches and every
//! output verifies, so tampered or stale artifacts are rebuilt rather than
//! trusted. Extraction is keyed independently of split/finetune settings and
//! is therefore shared across the grid and across sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{create_backend, BackendError, BackendSpec, ModelBackend};
use crate::config::{ConfigError, ExperimentConfig};
use crate::eval::{
    aggregate_runs, compute_gaps, evaluate_retrieval, scorer_for_checkpoint, EvalError,
    RelationAccuracy, RunReport, RunSummary, SeedCombo,
};
use crate::extract::{
    extract_knowledge, load_snapshot, save_snapshot, stratified_split, train_soft_prompts,
    ExtractError,
};
use crate::kb::{
    build_entity_pools, filter_single_token_tails, load_facts, Fact, FactSet, KbError,
};
use crate::report;
use crate::seeding::stream_u64;
use crate::task::{
    build_eval_instance, build_train_instance, parse_instances, split_iid, split_ood_by_relation,
    subsample_snapshot, write_instances, SplitKind, TaskError, TaskGenConfig, TaskSplit,
    TemplatePack,
};
use crate::templates::TemplateError;
use crate::train::{finetune, TrainError, TrainTask};

pub const CACHE_ROOT_ENV: &str = "XTEVAL_CACHE_ROOT";

#[derive(Debug, Error)]
pub enum OrchestrateError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("no run metrics found under {0}")]
    NoRuns(String),
}

fn io_err(path: &Path, source: std::io::Error) -> OrchestrateError {
    OrchestrateError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String, OrchestrateError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hash_bytes(&bytes))
}

fn short(key: &str) -> &str {
    &key[..12.min(key.len())]
}

/// Per-stage provenance record; `manifest.json` inside every stage dir.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub input_key: String,
    pub code_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub wall_clock_ms: u128,
    pub outputs: BTreeMap<String, String>,
}

fn stage_files(dir: &Path) -> Result<Vec<PathBuf>, OrchestrateError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        if path.is_file() && path.file_name().is_some_and(|n| n != "manifest.json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn finalize_stage(
    dir: &Path,
    stage: &str,
    input_key: &str,
    seeds: BTreeMap<String, u64>,
    config: serde_json::Value,
    started: Instant,
) -> Result<StageManifest, OrchestrateError> {
    let mut outputs = BTreeMap::new();
    for path in stage_files(dir)? {
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        outputs.insert(name, hash_file(&path)?);
    }
    let manifest = StageManifest {
        stage: stage.to_string(),
        input_key: input_key.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds,
        config,
        wall_clock_ms: started.elapsed().as_millis(),
        outputs,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// Manifest finalization for single-stage CLI verbs that write into an
/// explicit directory.
pub fn finalize_stage_dir<C: Serialize>(
    dir: &Path,
    stage: &str,
    input_key: &str,
    seed: u64,
    config: &C,
    started: Instant,
) -> Result<StageManifest, OrchestrateError> {
    finalize_stage(
        dir,
        stage,
        input_key,
        BTreeMap::from([(stage.to_string(), seed)]),
        serde_json::to_value(config).unwrap(),
        started,
    )
}

fn load_manifest(dir: &Path) -> Option<StageManifest> {
    let text = fs::read_to_string(dir.join("manifest.json")).ok()?;
    serde_json::from_str(&text).ok()
}

/// A stage is reusable when its manifest matches the input key and every
/// recorded output hash still verifies.
fn stage_valid(dir: &Path, input_key: &str) -> bool {
    let Some(manifest) = load_manifest(dir) else {
        return false;
    };
    if manifest.input_key != input_key {
        return false;
    }
    for (name, expected) in &manifest.outputs {
        match hash_file(&dir.join(name)) {
            Ok(actual) if &actual == expected => {}
            _ => {
                eprintln!(
                    "warning: output {name} in {} does not match its manifest; rebuilding stage",
                    dir.display()
                );
                return false;
            }
        }
    }
    true
}

fn reset_dir(dir: &Path) -> Result<(), OrchestrateError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Key material is built from semantic inputs only (content hashes, configs,
/// seeds), never from paths, so two runs of the same experiment in different
/// output roots produce identical stage names and identical files.
fn stage_key(material: &serde_json::Value) -> String {
    hash_bytes(serde_json::to_string(material).unwrap().as_bytes())
}

/// Generation metadata persisted next to the task files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskMeta {
    pub backend_id: String,
    pub extraction_seed: u64,
    pub split_seed: u64,
    pub base_seed: u64,
    pub snapshot_fraction: f64,
    pub extraction_fraction: f64,
    pub split_kind: SplitKind,
    pub ratio: f64,
    pub taskgen: TaskGenConfig,
    pub template_version: String,
}

/// One run's machine-readable metrics (`metrics.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub backend_id: String,
    pub seeds: SeedCombo,
    pub extraction_fraction: f64,
    pub downstream_accuracy: f64,
    pub usable_knowledge: f64,
    pub gap1: f64,
    pub gap2: f64,
    pub eval_instances: usize,
    pub best_epoch: usize,
    pub per_relation: BTreeMap<String, RelationAccuracy>,
}

impl RunMetrics {
    pub fn report(&self) -> RunReport {
        RunReport {
            seeds: self.seeds,
            backend_id: self.backend_id.clone(),
            gaps: crate::eval::GapReport {
                extraction_fraction: self.extraction_fraction,
                downstream_accuracy: self.downstream_accuracy,
                usable_knowledge: self.usable_knowledge,
                gap1: self.gap1,
                gap2: self.gap2,
            },
        }
    }
}

/// Materialize a task directory: snapshot facts, template pack, split,
/// generation metadata, and the epoch-0 train plus eval instance files.
pub fn write_task_dir(
    dir: &Path,
    snapshot_facts: &FactSet,
    pack: &TemplatePack,
    split: &TaskSplit,
    meta: &TaskMeta,
) -> Result<(), OrchestrateError> {
    fs::create_dir_all(dir).map_err(|err| io_err(dir, err))?;
    let pools = build_entity_pools(snapshot_facts)?;
    let facts_by_uid: BTreeMap<&crate::kb::FactUid, &Fact> =
        snapshot_facts.iter().map(|f| (&f.uid, f)).collect();
    let missing = split
        .train
        .iter()
        .chain(&split.test)
        .find(|u| !facts_by_uid.contains_key(u));
    if let Some(uid) = missing {
        return Err(OrchestrateError::Invalid(format!(
            "split references uid {uid} absent from the snapshot"
        )));
    }
    let train_facts: Vec<&Fact> = split.train.iter().map(|u| facts_by_uid[u]).collect();
    let test_facts: Vec<&Fact> = split.test.iter().map(|u| facts_by_uid[u]).collect();

    let mut train_instances = Vec::with_capacity(train_facts.len());
    for fact in &train_facts {
        train_instances.push(build_train_instance(
            fact,
            &meta.taskgen,
            pack,
            &pools,
            meta.base_seed,
            0,
        )?);
    }
    let mut eval_instances = Vec::with_capacity(test_facts.len());
    for fact in &test_facts {
        eval_instances.push(build_eval_instance(
            fact,
            &test_facts,
            &meta.taskgen,
            pack,
            &pools,
            meta.base_seed,
        )?);
    }

    crate::kb::save_canonical(snapshot_facts, &dir.join("snapshot_facts.jsonl"))?;
    let mut pack_buf = Vec::new();
    pack.write(&mut pack_buf).map_err(|err| io_err(dir, err))?;
    fs::write(dir.join("templates.jsonl"), pack_buf).map_err(|err| io_err(dir, err))?;
    fs::write(
        dir.join("split.json"),
        serde_json::to_string_pretty(split).unwrap(),
    )
    .map_err(|err| io_err(dir, err))?;
    fs::write(
        dir.join("taskgen.json"),
        serde_json::to_string_pretty(meta).unwrap(),
    )
    .map_err(|err| io_err(dir, err))?;
    for (name, instances) in [
        ("train_instances.jsonl", &train_instances),
        ("eval_instances.jsonl", &eval_instances),
    ] {
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|err| io_err(&path, err))?;
        let mut writer = std::io::BufWriter::new(file);
        write_instances(instances, &mut writer).map_err(|err| io_err(&path, err))?;
        writer.flush().map_err(|err| io_err(&path, err))?;
    }
    Ok(())
}

/// Loaded view of a task directory.
pub struct TaskDirData {
    pub snapshot_facts: FactSet,
    pub split: TaskSplit,
    pub meta: TaskMeta,
    pub pack: TemplatePack,
    pub eval_instances: Option<Vec<crate::task::RetrievalInstance>>,
}

pub fn load_task_dir(dir: &Path, with_eval: bool) -> Result<TaskDirData, OrchestrateError> {
    let snapshot_facts = crate::kb::load_canonical(&dir.join("snapshot_facts.jsonl"))?;
    let split: TaskSplit = serde_json::from_str(
        &fs::read_to_string(dir.join("split.json")).map_err(|err| io_err(dir, err))?,
    )
    .map_err(|err| OrchestrateError::Invalid(format!("bad split.json: {err}")))?;
    let meta: TaskMeta = serde_json::from_str(
        &fs::read_to_string(dir.join("taskgen.json")).map_err(|err| io_err(dir, err))?,
    )
    .map_err(|err| OrchestrateError::Invalid(format!("bad taskgen.json: {err}")))?;
    let pack = TemplatePack::parse(
        &fs::read_to_string(dir.join("templates.jsonl")).map_err(|err| io_err(dir, err))?,
    )?;
    let eval_instances = if with_eval {
        Some(parse_instances(
            &fs::read_to_string(dir.join("eval_instances.jsonl"))
                .map_err(|err| io_err(dir, err))?,
        )?)
    } else {
        None
    };
    Ok(TaskDirData {
        snapshot_facts,
        split,
        meta,
        pack,
        eval_instances,
    })
}

/// Persist a finetuning run's config snapshot, per-epoch metrics, and best
/// checkpoint into a run directory.
pub fn write_train_outputs(
    dir: &Path,
    backend_spec: &str,
    model: &crate::train::FinetunedModel,
    meta: &TaskMeta,
) -> Result<(), OrchestrateError> {
    fs::create_dir_all(dir).map_err(|err| io_err(dir, err))?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "backend": backend_spec,
            "finetune": &model.config,
            "seeds": {
                "extraction": meta.extraction_seed,
                "split": meta.split_seed,
                "finetune": model.seed,
            },
            "task_base_seed": meta.base_seed,
            "best_epoch": model.best_epoch,
        }))
        .unwrap(),
    )
    .map_err(|err| io_err(dir, err))?;
    let mut epochs_buf = Vec::new();
    for epoch in &model.epochs {
        serde_json::to_writer(&mut epochs_buf, epoch).unwrap();
        epochs_buf.push(b'\n');
    }
    fs::write(dir.join("epochs.jsonl"), epochs_buf).map_err(|err| io_err(dir, err))?;
    fs::write(
        dir.join("checkpoint.json"),
        serde_json::to_string(&model.checkpoint).unwrap(),
    )
    .map_err(|err| io_err(dir, err))?;
    Ok(())
}

/// Persist evaluation outputs: machine-readable metrics plus the
/// per-instance rank detail.
pub fn write_eval_outputs(
    dir: &Path,
    metrics: &RunMetrics,
    result: &crate::eval::RetrievalResult,
) -> Result<(), OrchestrateError> {
    fs::create_dir_all(dir).map_err(|err| io_err(dir, err))?;
    let mut detail_buf = Vec::new();
    for row in &result.per_instance {
        serde_json::to_writer(&mut detail_buf, row).unwrap();
        detail_buf.push(b'\n');
    }
    fs::write(dir.join("eval_detail.jsonl"), detail_buf).map_err(|err| io_err(dir, err))?;
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(metrics).unwrap(),
    )
    .map_err(|err| io_err(dir, err))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureRecord {
    pub stage: String,
    pub combo: String,
    pub error: String,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub summary: Option<RunSummary>,
    pub metrics: Vec<RunMetrics>,
    pub failures: Vec<FailureRecord>,
    pub report_dir: PathBuf,
}

impl ExperimentOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Output layout for one experiment. Extraction always lives directly under
/// the root so sweeps share it; tasks/runs/report may be scoped into a
/// sweep-specific subdirectory.
#[derive(Debug, Clone)]
pub struct Scope {
    root: PathBuf,
    sub: Option<String>,
}

impl Scope {
    pub fn new(root: &Path) -> Self {
        Scope {
            root: root.to_path_buf(),
            sub: None,
        }
    }

    pub fn scoped(root: &Path, sub: &str) -> Self {
        Scope {
            root: root.to_path_buf(),
            sub: Some(sub.to_string()),
        }
    }

    fn extraction_root(&self) -> PathBuf {
        self.root.join("extraction")
    }

    fn scoped_root(&self) -> PathBuf {
        match &self.sub {
            Some(sub) => self.root.join(sub),
            None => self.root.clone(),
        }
    }

    fn tasks_root(&self) -> PathBuf {
        self.scoped_root().join("tasks")
    }

    fn runs_root(&self) -> PathBuf {
        self.scoped_root().join("runs")
    }

    pub fn report_root(&self) -> PathBuf {
        self.scoped_root().join("report")
    }
}

struct Context {
    cfg: ExperimentConfig,
    scope: Scope,
    spec: BackendSpec,
    diagnostic: FactSet,
    diagnostic_hash: String,
    backends: BTreeMap<u64, Arc<dyn ModelBackend>>,
    template_file: Option<(String, String)>, // (content, version)
}

impl Context {
    fn new(cfg: &ExperimentConfig, scope: Scope) -> Result<Self, OrchestrateError> {
        cfg.validate()?;
        cfg.validate_paths()?;
        for warning in cfg.finetune.overrides() {
            eprintln!("warning: finetune override: {warning}");
        }
        let spec = BackendSpec::parse(&cfg.backend)?;
        let diagnostic = load_facts(&cfg.diagnostic, cfg.diagnostic_format)?;
        let diagnostic_hash = diagnostic.content_hash();
        let cache_root = std::env::var_os(CACHE_ROOT_ENV).map(PathBuf::from);
        let mut backends: BTreeMap<u64, Arc<dyn ModelBackend>> = BTreeMap::new();
        match &spec {
            BackendSpec::Oracle { .. } => {
                for &e in &cfg.extraction_seeds {
                    let backend = create_backend(&spec, &diagnostic, e, cache_root.as_deref())?;
                    backends.insert(e, Arc::from(backend));
                }
            }
            BackendSpec::Tiny(_) => {
                // Pretraining ignores the extraction seed; share one model.
                let backend = create_backend(&spec, &diagnostic, 0, cache_root.as_deref())?;
                let shared: Arc<dyn ModelBackend> = Arc::from(backend);
                for &e in &cfg.extraction_seeds {
                    backends.insert(e, Arc::clone(&shared));
                }
            }
        }
        let template_file = match &cfg.templates {
            Some(path) => {
                let content = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                let pack = TemplatePack::parse(&content)?;
                Some((content, pack.version))
            }
            None => None,
        };
        Ok(Context {
            cfg: cfg.clone(),
            scope,
            spec,
            diagnostic,
            diagnostic_hash,
            backends,
            template_file,
        })
    }

    fn backend(&self, extraction_seed: u64) -> &dyn ModelBackend {
        self.backends
            .get(&extraction_seed)
            .expect("backend created for every extraction seed")
            .as_ref()
    }

    fn template_version(&self) -> String {
        self.template_file
            .as_ref()
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| "default-v1".to_string())
    }

    fn pack_for(&self, facts: &FactSet) -> Result<TemplatePack, OrchestrateError> {
        match &self.template_file {
            Some((content, _)) => {
                let pack = TemplatePack::parse(content)?;
                pack.check_covers(facts.relations())?;
                Ok(pack)
            }
            None => Ok(TemplatePack::default_for_relations(facts.relations())),
        }
    }

    fn extraction_key(&self, e: u64) -> String {
        stage_key(&serde_json::json!({
            "stage": "extraction",
            "backend": self.spec.canonical_id(),
            "diagnostic": self.diagnostic_hash,
            "extraction": &self.cfg.extraction,
            "seed": e,
        }))
    }

    fn ensure_extraction(&self, e: u64) -> Result<PathBuf, OrchestrateError> {
        let key = self.extraction_key(e);
        let dir = self
            .scope
            .extraction_root()
            .join(format!("e{e}_{}", short(&key)));
        if stage_valid(&dir, &key) {
            return Ok(dir);
        }
        let started = Instant::now();
        reset_dir(&dir)?;
        let backend = self.backend(e);
        let filtered = filter_single_token_tails(&self.diagnostic, backend);
        let (train, val) = stratified_split(
            &filtered.kept,
            self.cfg.extraction.validation_fraction,
            e,
        );
        let prompts = train_soft_prompts(backend, &train, &val, &self.cfg.extraction, e)?;
        let snapshot = extract_knowledge(backend, &prompts, &filtered.kept, e)?;
        save_snapshot(&dir, &snapshot, &prompts, &self.diagnostic_hash, filtered.dropped)?;
        finalize_stage(
            &dir,
            "extraction",
            &key,
            BTreeMap::from([("extraction".to_string(), e)]),
            serde_json::to_value(&self.cfg.extraction).unwrap(),
            started,
        )?;
        Ok(dir)
    }

    fn task_key(&self, extraction_key: &str, s: u64) -> String {
        stage_key(&serde_json::json!({
            "stage": "task",
            "extraction_key": extraction_key,
            "split": self.cfg.split,
            "ratio": self.cfg.ratio,
            "snapshot_fraction": self.cfg.snapshot_fraction,
            "taskgen": &self.cfg.taskgen,
            "templates": self.template_version(),
            "seed": s,
        }))
    }

    fn ensure_task(&self, e: u64, s: u64) -> Result<PathBuf, OrchestrateError> {
        let extraction_dir = self.ensure_extraction(e)?;
        let extraction_key = self.extraction_key(e);
        let key = self.task_key(&extraction_key, s);
        let dir = self
            .scope
            .tasks_root()
            .join(format!("e{e}_s{s}_{}", short(&key)));
        if stage_valid(&dir, &key) {
            return Ok(dir);
        }
        let started = Instant::now();
        reset_dir(&dir)?;
        let (snapshot, _) = load_snapshot(&extraction_dir)?;
        // The subsample is keyed by the extraction seed only, so every split
        // and finetune seed sees the same initial knowledge.
        let subsample_seed = stream_u64("orchestrate.subsample", &[&e.to_le_bytes()]);
        let snapshot = subsample_snapshot(&snapshot, self.cfg.snapshot_fraction, subsample_seed)?;
        let pack = self.pack_for(&snapshot.facts)?;
        let split = match self.cfg.split {
            SplitKind::Iid => split_iid(&snapshot, self.cfg.ratio, s)?,
            SplitKind::OodRelation => split_ood_by_relation(&snapshot, self.cfg.ratio, s)?,
        };
        let base_seed = stream_u64("task.base", &[&e.to_le_bytes(), &s.to_le_bytes()]);
        let meta = TaskMeta {
            backend_id: snapshot.backend_id.clone(),
            extraction_seed: e,
            split_seed: s,
            base_seed,
            snapshot_fraction: self.cfg.snapshot_fraction,
            extraction_fraction: snapshot.extraction_fraction,
            split_kind: self.cfg.split,
            ratio: self.cfg.ratio,
            taskgen: self.cfg.taskgen.clone(),
            template_version: pack.version.clone(),
        };
        write_task_dir(&dir, &snapshot.facts, &pack, &split, &meta)?;
        finalize_stage(
            &dir,
            "task",
            &key,
            BTreeMap::from([("extraction".to_string(), e), ("split".to_string(), s)]),
            serde_json::json!({
                "split": self.cfg.split,
                "ratio": self.cfg.ratio,
                "snapshot_fraction": self.cfg.snapshot_fraction,
                "taskgen": &self.cfg.taskgen,
            }),
            started,
        )?;
        Ok(dir)
    }

    fn run_key(&self, task_key: &str, f: u64) -> String {
        stage_key(&serde_json::json!({
            "stage": "run",
            "task_key": task_key,
            "finetune": &self.cfg.finetune,
            "seed": f,
        }))
    }

    fn ensure_run(&self, e: u64, s: u64, f: u64) -> Result<RunMetrics, OrchestrateError> {
        let task_dir = self.ensure_task(e, s)?;
        let extraction_key = self.extraction_key(e);
        let task_key = self.task_key(&extraction_key, s);
        let key = self.run_key(&task_key, f);
        let dir = self
            .scope
            .runs_root()
            .join(format!("e{e}_s{s}_f{f}_{}", short(&key)));
        if stage_valid(&dir, &key) {
            let text = fs::read_to_string(dir.join("metrics.json"))
                .map_err(|err| io_err(&dir, err))?;
            if let Ok(metrics) = serde_json::from_str::<RunMetrics>(&text) {
                return Ok(metrics);
            }
        }
        let started = Instant::now();
        reset_dir(&dir)?;

        let data = load_task_dir(&task_dir, true)?;
        let pools = build_entity_pools(&data.snapshot_facts)?;
        let facts_by_uid: BTreeMap<&crate::kb::FactUid, &Fact> = data
            .snapshot_facts
            .iter()
            .map(|fact| (&fact.uid, fact))
            .collect();
        let train_facts: Vec<&Fact> = data
            .split
            .train
            .iter()
            .filter_map(|u| facts_by_uid.get(u).copied())
            .collect();
        let eval_instances = data.eval_instances.as_ref().expect("loaded with eval");
        let meta = &data.meta;

        let backend = self.backend(e);
        let task = TrainTask {
            facts: train_facts,
            pack: &data.pack,
            pools: &pools,
            gen: &meta.taskgen,
            base_seed: meta.base_seed,
        };
        let model = finetune(backend, &task, &self.cfg.finetune, f)?;
        let scorer = scorer_for_checkpoint(&model.checkpoint)?;
        let result = evaluate_retrieval(scorer.as_ref(), eval_instances)?;
        let gaps = compute_gaps(meta.extraction_fraction, result.accuracy)?;

        let metrics = RunMetrics {
            backend_id: model.backend_id.clone(),
            seeds: SeedCombo {
                extraction: e,
                split: s,
                finetune: f,
            },
            extraction_fraction: gaps.extraction_fraction,
            downstream_accuracy: gaps.downstream_accuracy,
            usable_knowledge: gaps.usable_knowledge,
            gap1: gaps.gap1,
            gap2: gaps.gap2,
            eval_instances: result.instances,
            best_epoch: model.best_epoch,
            per_relation: result.per_relation.clone(),
        };

        write_train_outputs(&dir, &self.cfg.backend, &model, meta)?;
        write_eval_outputs(&dir, &metrics, &result)?;
        finalize_stage(
            &dir,
            "run",
            &key,
            BTreeMap::from([
                ("extraction".to_string(), e),
                ("split".to_string(), s),
                ("finetune".to_string(), f),
            ]),
            serde_json::to_value(&self.cfg.finetune).unwrap(),
            started,
        )?;
        Ok(metrics)
    }
}

fn write_report_files(
    report_dir: &Path,
    summary: &RunSummary,
) -> Result<Vec<PathBuf>, OrchestrateError> {
    fs::create_dir_all(report_dir).map_err(|e| io_err(report_dir, e))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, content: String| -> Result<(), OrchestrateError> {
        let path = report_dir.join(name);
        report::write_if_changed(&path, &content).map_err(|e| io_err(&path, e))?;
        written.push(path);
        Ok(())
    };
    emit("summary.json", serde_json::to_string_pretty(summary).unwrap())?;
    emit("summary.txt", report::summary_text(summary))?;

    let run_rows: Vec<Vec<String>> = summary
        .grid
        .iter()
        .map(|r| {
            vec![
                r.seeds.extraction.to_string(),
                r.seeds.split.to_string(),
                r.seeds.finetune.to_string(),
                format!("{:.6}", r.gaps.extraction_fraction),
                format!("{:.6}", r.gaps.downstream_accuracy),
                format!("{:.6}", r.gaps.usable_knowledge),
                format!("{:.6}", r.gaps.gap1),
                format!("{:.6}", r.gaps.gap2),
            ]
        })
        .collect();
    emit(
        "runs.tsv",
        report::table_tsv(
            &[
                "extraction_seed",
                "split_seed",
                "finetune_seed",
                "extraction_fraction",
                "downstream_accuracy",
                "usable_knowledge",
                "gap1",
                "gap2",
            ],
            &run_rows,
        ),
    )?;

    // Per-extraction-seed fractions and per-run accuracies.
    let mut by_extraction: BTreeMap<u64, f64> = BTreeMap::new();
    for run in &summary.grid {
        by_extraction
            .entry(run.seeds.extraction)
            .or_insert(run.gaps.extraction_fraction);
    }
    let labels: Vec<String> = by_extraction.keys().map(|e| format!("seed {e}")).collect();
    let values: Vec<f64> = by_extraction.values().copied().collect();
    emit(
        "extraction_fraction.svg",
        report::bar_chart_svg("extraction fraction per extraction seed", &labels, &values, None),
    )?;
    let labels: Vec<String> = summary
        .grid
        .iter()
        .map(|r| format!("e{}s{}f{}", r.seeds.extraction, r.seeds.split, r.seeds.finetune))
        .collect();
    let values: Vec<f64> = summary.grid.iter().map(|r| r.gaps.downstream_accuracy).collect();
    emit(
        "downstream_accuracy.svg",
        report::bar_chart_svg("downstream top-1 accuracy per run", &labels, &values, None),
    )?;
    emit(
        "gaps_stacked.svg",
        report::stacked_gap_svg(
            "knowledge gaps",
            std::slice::from_ref(&summary.backend_id),
            &[(
                summary.usable_knowledge.mean,
                summary.gap2.mean,
                summary.gap1.mean,
            )],
        ),
    )?;
    Ok(written)
}

fn write_experiment_manifest(
    scope: &Scope,
    cfg: &ExperimentConfig,
    metrics: &[RunMetrics],
    failures: &[FailureRecord],
    report_files: &[PathBuf],
) -> Result<(), OrchestrateError> {
    let root = scope.scoped_root();
    fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
    let mut report_hashes = BTreeMap::new();
    for path in report_files {
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        report_hashes.insert(format!("report/{name}"), hash_file(path)?);
    }
    let manifest = serde_json::json!({
        "config": cfg.config_json(),
        "code_version": env!("CARGO_PKG_VERSION"),
        "runs": metrics.iter().map(|m| m.seeds).collect::<Vec<_>>(),
        "failures": failures,
        "report_outputs": report_hashes,
    });
    let path = root.join("experiment.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// Execute the full extraction → task → train → evaluate grid for every
/// seed combination. A stage error aborts only the combinations that depend
/// on it; completed runs are aggregated either way.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, OrchestrateError> {
    run_scoped(cfg, Scope::new(&cfg.out_dir))
}

pub fn run_scoped(cfg: &ExperimentConfig, scope: Scope) -> Result<ExperimentOutcome, OrchestrateError> {
    let ctx = Context::new(cfg, scope)?;
    let mut failures = Vec::new();

    // Extraction and task stages, sequential (they are few and shared).
    let mut task_ready: Vec<(u64, u64)> = Vec::new();
    for &e in &cfg.extraction_seeds {
        if let Err(err) = ctx.ensure_extraction(e) {
            failures.push(FailureRecord {
                stage: "extraction".into(),
                combo: format!("e{e}"),
                error: err.to_string(),
            });
            continue;
        }
        for &s in &cfg.split_seeds {
            match ctx.ensure_task(e, s) {
                Ok(_) => task_ready.push((e, s)),
                Err(err) => failures.push(FailureRecord {
                    stage: "task".into(),
                    combo: format!("e{e}_s{s}"),
                    error: err.to_string(),
                }),
            }
        }
    }

    let combos: Vec<(u64, u64, u64)> = task_ready
        .iter()
        .flat_map(|&(e, s)| cfg.finetune_seeds.iter().map(move |&f| (e, s, f)))
        .collect();

    let metrics = Mutex::new(Vec::new());
    let run_failures = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let workers = cfg.workers.clamp(1, combos.len().max(1));
    std::thread::scope(|threads| {
        for _ in 0..workers {
            threads.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(e, s, f)) = combos.get(idx) else {
                    break;
                };
                match ctx.ensure_run(e, s, f) {
                    Ok(m) => metrics.lock().unwrap().push(m),
                    Err(err) => run_failures.lock().unwrap().push(FailureRecord {
                        stage: "run".into(),
                        combo: format!("e{e}_s{s}_f{f}"),
                        error: err.to_string(),
                    }),
                }
            });
        }
    });
    let mut metrics = metrics.into_inner().unwrap();
    failures.extend(run_failures.into_inner().unwrap());
    metrics.sort_by_key(|m| m.seeds);

    let summary = if metrics.is_empty() {
        None
    } else {
        Some(aggregate_runs(
            &metrics.iter().map(|m| m.report()).collect::<Vec<_>>(),
        )?)
    };
    let report_dir = ctx.scope.report_root();
    let mut report_files = Vec::new();
    if let Some(summary) = &summary {
        report_files = write_report_files(&report_dir, summary)?;
    }
    write_experiment_manifest(&ctx.scope, cfg, &metrics, &failures, &report_files)?;
    Ok(ExperimentOutcome {
        summary,
        metrics,
        failures,
        report_dir,
    })
}

fn fraction_label(fraction: f64) -> String {
    format!("{fraction}")
}

/// Run the pipeline once per snapshot fraction, sharing extraction, and emit
/// an accuracy-versus-fraction table and chart.
pub fn sweep_fraction(
    cfg: &ExperimentConfig,
    fractions: &[f64],
) -> Result<Vec<(String, ExperimentOutcome)>, OrchestrateError> {
    if fractions.is_empty() {
        return Err(OrchestrateError::Invalid("empty fraction list".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &fraction in fractions {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(OrchestrateError::Invalid(format!(
                "fraction {fraction} outside (0, 1]"
            )));
        }
        if !seen.insert(fraction.to_bits()) {
            return Err(OrchestrateError::Invalid(format!(
                "duplicate fraction {fraction}"
            )));
        }
    }
    let mut outcomes = Vec::new();
    for &fraction in fractions {
        let mut sub_cfg = cfg.clone();
        sub_cfg.snapshot_fraction = fraction;
        let label = fraction_label(fraction);
        let scope = Scope::scoped(&cfg.out_dir, &format!("sweeps/fraction/f{label}"));
        let outcome = run_scoped(&sub_cfg, scope)?;
        outcomes.push((label, outcome));
    }
    write_sweep_report(
        &cfg.out_dir.join("sweeps/fraction/report"),
        "snapshot fraction",
        &outcomes,
    )?;
    Ok(outcomes)
}

/// Run the pipeline once per negatives-per-type count with the snapshot held
/// fixed via the shared extraction cache.
pub fn sweep_negatives(
    cfg: &ExperimentConfig,
    counts: &[usize],
) -> Result<Vec<(String, ExperimentOutcome)>, OrchestrateError> {
    if counts.is_empty() {
        return Err(OrchestrateError::Invalid("empty negative-count list".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &count in counts {
        if count == 0 {
            return Err(OrchestrateError::Invalid(
                "negatives per type must be >= 1".into(),
            ));
        }
        if !seen.insert(count) {
            return Err(OrchestrateError::Invalid(format!(
                "duplicate negative count {count}"
            )));
        }
    }
    let mut outcomes = Vec::new();
    for &count in counts {
        let mut sub_cfg = cfg.clone();
        sub_cfg.taskgen.negatives_per_type = count;
        let label = count.to_string();
        let scope = Scope::scoped(&cfg.out_dir, &format!("sweeps/negatives/n{label}"));
        let outcome = run_scoped(&sub_cfg, scope)?;
        outcomes.push((label, outcome));
    }
    write_sweep_report(
        &cfg.out_dir.join("sweeps/negatives/report"),
        "negatives per type",
        &outcomes,
    )?;
    Ok(outcomes)
}

fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Run the grid per backend and emit the cross-backend stacked-gap figure.
pub fn sweep_backends(
    cfg: &ExperimentConfig,
    backends: &[String],
) -> Result<Vec<(String, ExperimentOutcome)>, OrchestrateError> {
    if backends.is_empty() {
        return Err(OrchestrateError::Invalid("empty backend list".into()));
    }
    let mut ids = std::collections::BTreeSet::new();
    for raw in backends {
        let spec = BackendSpec::parse(raw)?;
        if !ids.insert(spec.canonical_id()) {
            return Err(OrchestrateError::Invalid(format!(
                "duplicate backend id {:?}",
                spec.canonical_id()
            )));
        }
    }
    let mut outcomes = Vec::new();
    for (index, raw) in backends.iter().enumerate() {
        let spec = BackendSpec::parse(raw)?;
        let id = spec.canonical_id();
        let mut sub_cfg = cfg.clone();
        sub_cfg.backend = raw.clone();
        let scope = Scope::scoped(
            &cfg.out_dir,
            &format!("sweeps/backends/b{index}_{}", sanitize_label(&id)),
        );
        let outcome = run_scoped(&sub_cfg, scope)?;
        outcomes.push((id, outcome));
    }
    write_sweep_report(
        &cfg.out_dir.join("sweeps/backends/report"),
        "backend",
        &outcomes,
    )?;
    Ok(outcomes)
}

fn write_sweep_report(
    dir: &Path,
    axis: &str,
    outcomes: &[(String, ExperimentOutcome)],
) -> Result<(), OrchestrateError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut labels = Vec::new();
    let mut accuracy = Vec::new();
    let mut accuracy_std = Vec::new();
    let mut stacked = Vec::new();
    let mut rows = Vec::new();
    for (label, outcome) in outcomes {
        let Some(summary) = &outcome.summary else {
            continue;
        };
        labels.push(label.clone());
        accuracy.push(summary.downstream_accuracy.mean);
        accuracy_std.push(summary.downstream_accuracy.std);
        stacked.push((
            summary.usable_knowledge.mean,
            summary.gap2.mean,
            summary.gap1.mean,
        ));
        rows.push(vec![
            label.clone(),
            summary.runs.to_string(),
            format!("{:.6}", summary.extraction_fraction.mean),
            format!("{:.6}", summary.downstream_accuracy.mean),
            format!("{:.6}", summary.downstream_accuracy.std),
            format!("{:.6}", summary.usable_knowledge.mean),
            format!("{:.6}", summary.gap1.mean),
            format!("{:.6}", summary.gap2.mean),
        ]);
    }
    let table = report::table_tsv(
        &[
            axis,
            "runs",
            "extraction_fraction_mean",
            "downstream_accuracy_mean",
            "downstream_accuracy_std",
            "usable_knowledge_mean",
            "gap1_mean",
            "gap2_mean",
        ],
        &rows,
    );
    let accuracy_svg = report::bar_chart_svg(
        &format!("downstream accuracy vs {axis}"),
        &labels,
        &accuracy,
        Some(&accuracy_std),
    );
    let stacked_svg =
        report::stacked_gap_svg(&format!("knowledge gaps vs {axis}"), &labels, &stacked);
    for (name, content) in [
        ("sweep.tsv", table),
        ("accuracy.svg", accuracy_svg),
        ("gaps_stacked.svg", stacked_svg),
    ] {
        let path = dir.join(name);
        report::write_if_changed(&path, &content).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Re-aggregate run metrics found under a root and regenerate the report.
pub fn rebuild_report(root: &Path) -> Result<ExperimentOutcome, OrchestrateError> {
    let runs_dir = root.join("runs");
    let mut metrics: Vec<RunMetrics> = Vec::new();
    if runs_dir.exists() {
        for entry in fs::read_dir(&runs_dir).map_err(|e| io_err(&runs_dir, e))? {
            let entry = entry.map_err(|e| io_err(&runs_dir, e))?;
            let metrics_path = entry.path().join("metrics.json");
            if metrics_path.is_file() {
                let text =
                    fs::read_to_string(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
                let parsed: RunMetrics = serde_json::from_str(&text).map_err(|e| {
                    OrchestrateError::Invalid(format!(
                        "bad metrics file {}: {e}",
                        metrics_path.display()
                    ))
                })?;
                metrics.push(parsed);
            }
        }
    }
    if metrics.is_empty() {
        return Err(OrchestrateError::NoRuns(root.display().to_string()));
    }
    metrics.sort_by_key(|m| m.seeds);
    let summary = aggregate_runs(&metrics.iter().map(|m| m.report()).collect::<Vec<_>>())?;
    let report_dir = root.join("report");
    write_report_files(&report_dir, &summary)?;
    Ok(ExperimentOutcome {
        summary: Some(summary),
        metrics,
        failures: Vec::new(),
        report_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::synthetic::{generate, SyntheticSpec};

    fn write_diag(dir: &Path) -> PathBuf {
        let facts = generate(&SyntheticSpec {
            relations: 4,
            facts_per_relation: 40,
            head_pool: 100,
            tails_per_relation: 8,
            seed: 3,
        });
        let path = dir.join("diag.tsv");
        let mut out = String::new();
        for fact in facts.iter() {
            out.push_str(&format!("{}\t{}\t{}\n", fact.head, fact.relation, fact.tail));
        }
        fs::write(&path, out).unwrap();
        path
    }

    fn quick_cfg(dir: &Path) -> ExperimentConfig {
        let diag = write_diag(dir);
        ExperimentConfig::from_toml_str(&format!(
            "schema_version = 1\n\
             backend = \"oracle(knowledge=0.6,utilization=0.5)\"\n\
             diagnostic = {diag:?}\n\
             diagnostic_format = \"tsv\"\n\
             out_dir = {out:?}\n\
             extraction_seeds = [1, 2]\n\
             split_seeds = [1]\n\
             finetune_seeds = [1, 2]\n\
             [taskgen]\n\
             eval_samples_per_type = 5\n\
             unrelated_true_count = 5\n",
            diag = diag.to_str().unwrap(),
            out = dir.join("out").to_str().unwrap(),
        ))
        .unwrap()
    }

    #[test]
    fn grid_runs_and_aggregates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.is_complete(), "failures: {:?}", outcome.failures);
        let summary = outcome.summary.unwrap();
        assert_eq!(summary.runs, 4);
        assert!(summary.complete);
        assert!(outcome.report_dir.join("summary.json").is_file());
        assert!(outcome.report_dir.join("gaps_stacked.svg").is_file());
        // Oracle sanity: accuracy near the configured utilization rate.
        assert!((summary.downstream_accuracy.mean - 0.5).abs() < 0.2);
    }

    #[test]
    fn resume_skips_completed_stages() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        run_experiment(&cfg).unwrap();
        // Capture run-dir manifest timestamps via metrics hashes.
        let runs_root = dir.path().join("out/runs");
        let first: Vec<(PathBuf, String)> = fs::read_dir(&runs_root)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path().join("metrics.json");
                let h = hash_file(&p).unwrap();
                (p, h)
            })
            .collect();
        // Delete exactly one run dir and rerun: only it is rebuilt, with
        // identical content.
        let victim = fs::read_dir(&runs_root).unwrap().next().unwrap().unwrap().path();
        fs::remove_dir_all(&victim).unwrap();
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.is_complete());
        for (path, hash) in first {
            assert_eq!(hash_file(&path).unwrap(), hash, "{}", path.display());
        }
    }

    #[test]
    fn tampering_is_detected_and_rebuilt() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        run_experiment(&cfg).unwrap();
        let tasks_root = dir.path().join("out/tasks");
        let task_dir = fs::read_dir(&tasks_root).unwrap().next().unwrap().unwrap().path();
        let split_path = task_dir.join("split.json");
        let original = fs::read_to_string(&split_path).unwrap();
        fs::write(&split_path, original.replace("iid", "IID")).unwrap();
        run_experiment(&cfg).unwrap();
        assert_eq!(fs::read_to_string(&split_path).unwrap(), original);
    }

    #[test]
    fn determinism_across_output_roots() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_a = quick_cfg(dir.path());
        let mut cfg_b = cfg_a.clone();
        cfg_b.out_dir = dir.path().join("out_b");
        run_experiment(&cfg_a).unwrap();
        run_experiment(&cfg_b).unwrap();
        // Same relative paths, same bytes, for task and metrics files.
        for sub in ["tasks", "runs"] {
            let root_a = cfg_a.out_dir.join(sub);
            let mut names = Vec::new();
            for entry in fs::read_dir(&root_a).unwrap() {
                names.push(entry.unwrap().file_name());
            }
            assert!(!names.is_empty());
            for name in names {
                let dir_a = root_a.join(&name);
                let dir_b = cfg_b.out_dir.join(sub).join(&name);
                assert!(dir_b.is_dir(), "missing {}", dir_b.display());
                for file in stage_files(&dir_a).unwrap() {
                    let fname = file.file_name().unwrap();
                    let other = dir_b.join(fname);
                    assert_eq!(
                        hash_file(&file).unwrap(),
                        hash_file(&other).unwrap(),
                        "{}",
                        other.display()
                    );
                }
            }
        }
    }

    #[test]
    fn ood_grid_reports_per_relation_breakdown() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(dir.path());
        cfg.split = SplitKind::OodRelation;
        cfg.extraction_seeds = vec![1];
        cfg.finetune_seeds = vec![1];
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.is_complete(), "failures: {:?}", outcome.failures);
        let metrics = &outcome.metrics[0];
        assert!(!metrics.per_relation.is_empty());
        // OOD: evaluated relations form a strict subset of the snapshot's.
        assert!(metrics.per_relation.len() < 4);
    }

    #[test]
    fn backend_sweep_orders_gaps_by_knowledge_rate() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(dir.path());
        cfg.extraction_seeds = vec![1];
        cfg.finetune_seeds = vec![1];
        let outcomes = sweep_backends(
            &cfg,
            &[
                "oracle(knowledge=0.3,utilization=0.5)".to_string(),
                "oracle(knowledge=0.6,utilization=0.5)".to_string(),
            ],
        )
        .unwrap();
        let low = outcomes[0].1.summary.as_ref().unwrap();
        let high = outcomes[1].1.summary.as_ref().unwrap();
        // More acquired knowledge: gap 1 shrinks, gap 2 grows in absolute
        // terms at fixed utilization.
        assert!(high.gap1.mean < low.gap1.mean);
        assert!(high.gap2.mean > low.gap2.mean);
        assert!(dir.path().join("out/sweeps/backends/report/gaps_stacked.svg").is_file());
    }

    #[test]
    fn full_fraction_sweep_matches_base_run_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(dir.path());
        cfg.extraction_seeds = vec![1];
        cfg.finetune_seeds = vec![1];
        run_experiment(&cfg).unwrap();
        sweep_fraction(&cfg, &[1.0]).unwrap();
        // Same stage keys, same bytes: fraction 1.0 reproduces the base
        // experiment's task and run files under the sweep scope.
        for sub in ["tasks", "runs"] {
            let base = cfg.out_dir.join(sub);
            let swept = cfg.out_dir.join("sweeps/fraction/f1").join(sub);
            for entry in fs::read_dir(&base).unwrap() {
                let name = entry.unwrap().file_name();
                let base_dir = base.join(&name);
                let swept_dir = swept.join(&name);
                assert!(swept_dir.is_dir(), "missing {}", swept_dir.display());
                for file in stage_files(&base_dir).unwrap() {
                    let fname = file.file_name().unwrap();
                    assert_eq!(
                        hash_file(&file).unwrap(),
                        hash_file(&swept_dir.join(fname)).unwrap(),
                        "diverged: {sub}/{}/{}",
                        name.to_string_lossy(),
                        fname.to_string_lossy()
                    );
                }
            }
        }
    }

    #[test]
    fn sweep_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        assert!(sweep_fraction(&cfg, &[]).is_err());
        assert!(sweep_fraction(&cfg, &[0.5, 0.5]).is_err());
        assert!(sweep_fraction(&cfg, &[1.2]).is_err());
        assert!(sweep_negatives(&cfg, &[]).is_err());
        assert!(sweep_negatives(&cfg, &[0]).is_err());
        assert!(sweep_backends(&cfg, &["oracle".into(), "oracle".into()]).is_err());
    }

    #[test]
    fn report_rebuild_matches_run_summary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        let outcome = run_experiment(&cfg).unwrap();
        let rebuilt = rebuild_report(&cfg.out_dir).unwrap();
        assert_eq!(
            serde_json::to_string(&outcome.summary.unwrap()).unwrap(),
            serde_json::to_string(&rebuilt.summary.unwrap()).unwrap()
        );
    }
}
