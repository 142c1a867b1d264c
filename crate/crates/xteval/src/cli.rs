//! Command-line interface: stage-by-stage verbs plus the full-grid `run`
//! and the ablation sweeps.
//!
//! Exit codes: 0 on success, 2 when a grid completed partially, 1 on fatal
//! errors.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, bail, Context as _};
use clap::{Args, Parser, Subcommand};

use crate::backend::{create_backend, BackendSpec, ModelCheckpoint};
use crate::config::ExperimentConfig;
use crate::eval::{compute_gaps, evaluate_retrieval, scorer_for_checkpoint, SeedCombo};
use crate::extract::{
    extract_knowledge, load_snapshot, save_snapshot, stratified_split, train_soft_prompts,
    ExtractionConfig,
};
use crate::kb::{build_entity_pools, filter_single_token_tails, load_facts, FactFormat};
use crate::orchestrate::{
    self, hash_bytes, load_task_dir, rebuild_report, run_experiment, sweep_backends,
    sweep_fraction, sweep_negatives, ExperimentOutcome, RunMetrics, TaskMeta, CACHE_ROOT_ENV,
};
use crate::seeding::stream_u64;
use crate::task::{
    split_iid, split_ood_by_relation, subsample_snapshot, SplitKind, TaskGenConfig, TemplatePack,
};
use crate::train::{finetune, FinetuneConfig, TrainTask};

#[derive(Parser)]
#[command(
    name = "xteval",
    version,
    about = "Extract a model's usable facts, build a retrieval task from them, \
             finetune, and measure the acquired-vs-usable knowledge gaps."
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DiagnosticArgs {
    /// Diagnostic fact file.
    #[arg(long)]
    diagnostic: PathBuf,
    /// Input format of the diagnostic file.
    #[arg(long, default_value = "lama_jsonl")]
    format: FactFormat,
}

#[derive(Subcommand)]
enum Command {
    /// Train per-relation soft prompts and extract the knowledge snapshot.
    Extract {
        /// Backend spec, e.g. "oracle(knowledge=0.34,utilization=0.5)" or "tiny-mlm".
        #[arg(long)]
        backend: String,
        #[command(flatten)]
        diagnostic: DiagnosticArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build train/eval retrieval task files from a snapshot directory.
    BuildTask {
        /// Snapshot directory produced by `extract`.
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, default_value = "iid")]
        split: SplitKind,
        #[arg(long, default_value_t = 0.6)]
        ratio: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        negatives_per_type: usize,
        /// Subsample this fraction of the snapshot before splitting.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        /// External template pack (JSONL); stock templates otherwise.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune the cross-encoder on a task directory.
    Train {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        backend: String,
        /// Diagnostic file the backend pretrains on; required for tiny
        /// backends, ignored by the oracle.
        #[arg(long)]
        diagnostic: Option<PathBuf>,
        #[arg(long, default_value = "lama_jsonl")]
        format: FactFormat,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained run directory on a task's eval instances.
    Evaluate {
        #[arg(long)]
        task: PathBuf,
        /// Run directory holding checkpoint.json and config.json.
        #[arg(long)]
        run: PathBuf,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute the full extraction × split × finetune seed grid.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rerun the grid at several snapshot fractions (shared extraction).
    SweepFraction {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated fractions in (0, 1], e.g. "0.2,0.4,0.6,0.8,1.0".
        #[arg(long)]
        fractions: String,
    },
    /// Rerun the grid at several negatives-per-type counts.
    SweepNegatives {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated counts, e.g. "2,4,10".
        #[arg(long)]
        counts: String,
    },
    /// Rerun the grid for several backends and compare their gaps.
    SweepBackends {
        #[arg(long)]
        config: PathBuf,
        /// Backend spec; repeat the flag for each backend.
        #[arg(long = "backend", required = true)]
        backends: Vec<String>,
    },
    /// Re-aggregate run metrics under a root and regenerate the report.
    Report {
        #[arg(long)]
        root: PathBuf,
    },
}

pub enum Outcome {
    Complete,
    Partial,
}

fn cache_root() -> Option<PathBuf> {
    std::env::var_os(CACHE_ROOT_ENV).map(PathBuf::from)
}

fn finish_grid(label: &str, outcome: &ExperimentOutcome) -> Outcome {
    if let Some(summary) = &outcome.summary {
        println!("{label}: {} runs", summary.runs);
        print!("{}", crate::report::summary_text(summary));
    }
    for failure in &outcome.failures {
        eprintln!(
            "error [{} {}]: {}",
            failure.stage, failure.combo, failure.error
        );
    }
    if outcome.is_complete() {
        Outcome::Complete
    } else {
        eprintln!("{label}: partial grid ({} failures)", outcome.failures.len());
        Outcome::Partial
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(|part| part.trim())
        .filter(|part| !part.is_empty())
        .map(|part| {
            part.parse::<T>()
                .map_err(|e| anyhow!("bad {what} {part:?}: {e}"))
        })
        .collect()
}

pub fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Extract {
            backend,
            diagnostic,
            seed,
            out,
        } => {
            let spec = BackendSpec::parse(&backend)?;
            let facts = load_facts(&diagnostic.diagnostic, diagnostic.format)?;
            let backend = create_backend(&spec, &facts, seed, cache_root().as_deref())?;
            let filtered = filter_single_token_tails(&facts, backend.as_ref());
            if filtered.dropped > 0 {
                eprintln!(
                    "dropped {} facts with multi-token tails ({} remain)",
                    filtered.dropped,
                    filtered.kept.len()
                );
            }
            let cfg = ExtractionConfig::default();
            let (train, val) = stratified_split(&filtered.kept, cfg.validation_fraction, seed);
            let started = Instant::now();
            let prompts = train_soft_prompts(backend.as_ref(), &train, &val, &cfg, seed)?;
            let snapshot = extract_knowledge(backend.as_ref(), &prompts, &filtered.kept, seed)?;
            save_snapshot(&out, &snapshot, &prompts, &facts.content_hash(), filtered.dropped)?;
            let key = hash_bytes(
                serde_json::to_string(&serde_json::json!({
                    "stage": "extraction",
                    "backend": spec.canonical_id(),
                    "diagnostic": facts.content_hash(),
                    "extraction": &cfg,
                    "seed": seed,
                }))
                .unwrap()
                .as_bytes(),
            );
            orchestrate::finalize_stage_dir(&out, "extraction", &key, seed, &cfg, started)?;
            println!(
                "extracted {}/{} facts (fraction {:.4}) into {}",
                snapshot.facts.len(),
                snapshot.diagnostic_size,
                snapshot.extraction_fraction,
                out.display()
            );
            Ok(Outcome::Complete)
        }
        Command::BuildTask {
            snapshot,
            split,
            ratio,
            seed,
            negatives_per_type,
            fraction,
            templates,
            out,
        } => {
            let (snapshot, _) = load_snapshot(&snapshot)?;
            let subsample_seed =
                stream_u64("orchestrate.subsample", &[&snapshot.seed.to_le_bytes()]);
            let snapshot = subsample_snapshot(&snapshot, fraction, subsample_seed)?;
            let pack = match &templates {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    let pack = TemplatePack::parse(&text)?;
                    pack.check_covers(snapshot.facts.relations())?;
                    pack
                }
                None => TemplatePack::default_for_relations(snapshot.facts.relations()),
            };
            let task_split = match split {
                SplitKind::Iid => split_iid(&snapshot, ratio, seed)?,
                SplitKind::OodRelation => split_ood_by_relation(&snapshot, ratio, seed)?,
            };
            let taskgen = TaskGenConfig {
                negatives_per_type,
                ..TaskGenConfig::default()
            };
            let meta = TaskMeta {
                backend_id: snapshot.backend_id.clone(),
                extraction_seed: snapshot.seed,
                split_seed: seed,
                base_seed: stream_u64(
                    "task.base",
                    &[&snapshot.seed.to_le_bytes(), &seed.to_le_bytes()],
                ),
                snapshot_fraction: fraction,
                extraction_fraction: snapshot.extraction_fraction,
                split_kind: split,
                ratio,
                taskgen,
                template_version: pack.version.clone(),
            };
            orchestrate::write_task_dir(&out, &snapshot.facts, &pack, &task_split, &meta)?;
            println!(
                "built task: {} train / {} eval instances in {}",
                task_split.train.len(),
                task_split.test.len(),
                out.display()
            );
            Ok(Outcome::Complete)
        }
        Command::Train {
            task,
            backend,
            diagnostic,
            format,
            seed,
            out,
        } => {
            let spec = BackendSpec::parse(&backend)?;
            let data = load_task_dir(&task, false)?;
            let universe = match (&spec, &diagnostic) {
                (_, Some(path)) => load_facts(path, format)?,
                (BackendSpec::Oracle { .. }, None) => data.snapshot_facts.clone(),
                (BackendSpec::Tiny(_), None) => bail!(
                    "tiny backends pretrain on the diagnostic corpus; pass --diagnostic"
                ),
            };
            let backend_instance =
                create_backend(&spec, &universe, data.meta.extraction_seed, cache_root().as_deref())?;
            let pools = build_entity_pools(&data.snapshot_facts)?;
            let facts_by_uid: BTreeMap<_, _> =
                data.snapshot_facts.iter().map(|f| (&f.uid, f)).collect();
            let train_facts: Vec<&crate::kb::Fact> = data
                .split
                .train
                .iter()
                .filter_map(|u| facts_by_uid.get(u).copied())
                .collect();
            let train_task = TrainTask {
                facts: train_facts,
                pack: &data.pack,
                pools: &pools,
                gen: &data.meta.taskgen,
                base_seed: data.meta.base_seed,
            };
            let cfg = FinetuneConfig::default();
            for warning in cfg.overrides() {
                eprintln!("warning: finetune override: {warning}");
            }
            let model = finetune(backend_instance.as_ref(), &train_task, &cfg, seed)?;
            orchestrate::write_train_outputs(&out, &backend, &model, &data.meta)?;
            println!(
                "finetuned: best epoch {} (validation accuracy {:.4}); checkpoint in {}",
                model.best_epoch,
                model.val_trace.iter().cloned().fold(f64::MIN, f64::max),
                out.display()
            );
            Ok(Outcome::Complete)
        }
        Command::Evaluate { task, run, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            let data = load_task_dir(&task, true)?;
            let checkpoint_text = std::fs::read_to_string(run.join("checkpoint.json"))
                .with_context(|| format!("reading {}", run.join("checkpoint.json").display()))?;
            let checkpoint: ModelCheckpoint = serde_json::from_str(&checkpoint_text)
                .context("parsing checkpoint.json")?;
            let config_text = std::fs::read_to_string(run.join("config.json")).ok();
            let finetune_seed = config_text
                .as_deref()
                .and_then(|t| serde_json::from_str::<serde_json::Value>(t).ok())
                .and_then(|v| v.pointer("/seeds/finetune").and_then(|s| s.as_u64()))
                .unwrap_or(0);
            let scorer = scorer_for_checkpoint(&checkpoint)?;
            let instances = data.eval_instances.as_ref().expect("loaded with eval");
            let result = evaluate_retrieval(scorer.as_ref(), instances)?;
            let gaps = compute_gaps(data.meta.extraction_fraction, result.accuracy)?;
            let metrics = RunMetrics {
                backend_id: data.meta.backend_id.clone(),
                seeds: SeedCombo {
                    extraction: data.meta.extraction_seed,
                    split: data.meta.split_seed,
                    finetune: finetune_seed,
                },
                extraction_fraction: gaps.extraction_fraction,
                downstream_accuracy: gaps.downstream_accuracy,
                usable_knowledge: gaps.usable_knowledge,
                gap1: gaps.gap1,
                gap2: gaps.gap2,
                eval_instances: result.instances,
                best_epoch: 0,
                per_relation: result.per_relation.clone(),
            };
            orchestrate::write_eval_outputs(&out, &metrics, &result)?;
            println!(
                "accuracy {:.4} over {} instances; usable knowledge {:.4}",
                result.accuracy, result.instances, gaps.usable_knowledge
            );
            Ok(Outcome::Complete)
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = run_experiment(&cfg)?;
            Ok(finish_grid("run", &outcome))
        }
        Command::SweepFraction { config, fractions } => {
            let cfg = ExperimentConfig::load(&config)?;
            let fractions: Vec<f64> = parse_list(&fractions, "fraction")?;
            let outcomes = sweep_fraction(&cfg, &fractions)?;
            let mut all_complete = true;
            for (label, outcome) in &outcomes {
                if !matches!(finish_grid(&format!("fraction {label}"), outcome), Outcome::Complete) {
                    all_complete = false;
                }
            }
            Ok(if all_complete { Outcome::Complete } else { Outcome::Partial })
        }
        Command::SweepNegatives { config, counts } => {
            let cfg = ExperimentConfig::load(&config)?;
            let counts: Vec<usize> = parse_list(&counts, "count")?;
            let outcomes = sweep_negatives(&cfg, &counts)?;
            let mut all_complete = true;
            for (label, outcome) in &outcomes {
                if !matches!(
                    finish_grid(&format!("negatives {label}"), outcome),
                    Outcome::Complete
                ) {
                    all_complete = false;
                }
            }
            Ok(if all_complete { Outcome::Complete } else { Outcome::Partial })
        }
        Command::SweepBackends { config, backends } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcomes = sweep_backends(&cfg, &backends)?;
            let mut all_complete = true;
            for (label, outcome) in &outcomes {
                if !matches!(finish_grid(label, outcome), Outcome::Complete) {
                    all_complete = false;
                }
            }
            Ok(if all_complete { Outcome::Complete } else { Outcome::Partial })
        }
        Command::Report { root } => {
            let outcome = rebuild_report(&root)?;
            Ok(finish_grid("report", &outcome))
        }
    }
}
