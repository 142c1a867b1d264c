//! Experiment configuration: a versioned TOML schema in which unknown keys
//! are errors, so a typo cannot silently corrupt a sweep.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::ExtractionConfig;
use crate::kb::FactFormat;
use crate::task::{DocType, SplitKind, TaskGenConfig};
use crate::train::FinetuneConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {found} (this build reads version {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn default_format() -> FactFormat {
    FactFormat::LamaJsonl
}

fn default_split() -> SplitKind {
    SplitKind::Iid
}

fn default_ratio() -> f64 {
    0.6
}

fn default_fraction() -> f64 {
    1.0
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Backend spec string, e.g. `oracle(knowledge=0.34,utilization=0.5)`.
    pub backend: String,
    pub diagnostic: PathBuf,
    #[serde(default = "default_format")]
    pub diagnostic_format: FactFormat,
    pub out_dir: PathBuf,
    /// Optional external template pack (JSONL); the stock pack otherwise.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: SplitKind,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_fraction")]
    pub snapshot_fraction: f64,
    #[serde(default = "default_seeds")]
    pub extraction_seeds: Vec<u64>,
    #[serde(default = "default_seeds")]
    pub split_seeds: Vec<u64>,
    #[serde(default = "default_seeds")]
    pub finetune_seeds: Vec<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub extraction: ExtractionConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub taskgen: TaskGenConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(input: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(input).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Structural validation; file-system checks live in
    /// [`Self::validate_paths`] so configs can be built in memory for tests.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        crate::backend::BackendSpec::parse(&self.backend)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "ratio {} outside (0, 1)",
                self.ratio
            )));
        }
        if !(self.snapshot_fraction > 0.0 && self.snapshot_fraction <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "snapshot_fraction {} outside (0, 1]",
                self.snapshot_fraction
            )));
        }
        for (name, seeds) in [
            ("extraction_seeds", &self.extraction_seeds),
            ("split_seeds", &self.split_seeds),
            ("finetune_seeds", &self.finetune_seeds),
        ] {
            if seeds.is_empty() {
                return Err(ConfigError::Invalid(format!("{name} must not be empty")));
            }
            let unique: std::collections::BTreeSet<_> = seeds.iter().collect();
            if unique.len() != seeds.len() {
                return Err(ConfigError::Invalid(format!("{name} contains duplicates")));
            }
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be >= 1".into()));
        }
        if self.taskgen.negatives_per_type == 0 {
            return Err(ConfigError::Invalid(
                "taskgen.negatives_per_type must be >= 1".into(),
            ));
        }
        if self.taskgen.eval_samples_per_type == 0 {
            return Err(ConfigError::Invalid(
                "taskgen.eval_samples_per_type must be >= 1".into(),
            ));
        }
        for doc_type in &self.taskgen.inference_types {
            if matches!(doc_type, DocType::Gold | DocType::UnrelatedTrue) {
                return Err(ConfigError::Invalid(format!(
                    "taskgen.inference_types may only contain slot-randomizing \
                     distractor types, found {doc_type:?}"
                )));
            }
        }
        if self.taskgen.inference_types.is_empty() {
            return Err(ConfigError::Invalid(
                "taskgen.inference_types must not be empty".into(),
            ));
        }
        let unique: std::collections::BTreeSet<_> = self.taskgen.inference_types.iter().collect();
        if unique.len() != self.taskgen.inference_types.len() {
            return Err(ConfigError::Invalid(
                "taskgen.inference_types contains duplicates".into(),
            ));
        }
        if self.extraction.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(ConfigError::Invalid("batch sizes must be >= 1".into()));
        }
        if self.extraction.epochs == 0 || self.finetune.epochs == 0 {
            return Err(ConfigError::Invalid("epoch counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Resolve and check every input path before any stage runs.
    pub fn validate_paths(&self) -> Result<(), ConfigError> {
        if !self.diagnostic.exists() {
            return Err(ConfigError::Invalid(format!(
                "diagnostic file {} does not exist",
                self.diagnostic.display()
            )));
        }
        if let Some(templates) = &self.templates {
            if !templates.exists() {
                return Err(ConfigError::Invalid(format!(
                    "template pack {} does not exist",
                    templates.display()
                )));
            }
        }
        Ok(())
    }

    /// Canonical JSON snapshot used in stage cache keys and manifests.
    pub fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        "schema_version = 1\n\
         backend = \"oracle(knowledge=0.34,utilization=0.5)\"\n\
         diagnostic = \"facts.jsonl\"\n\
         out_dir = \"out\"\n"
            .to_string()
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str(&minimal_toml()).unwrap();
        assert_eq!(cfg.ratio, 0.6);
        assert_eq!(cfg.extraction_seeds, vec![1, 2, 3]);
        assert_eq!(cfg.split_seeds.len() * cfg.extraction_seeds.len() * cfg.finetune_seeds.len(), 27);
        assert_eq!(cfg.taskgen.negatives_per_type, 4);
        assert_eq!(cfg.finetune.learning_rate, 1e-5);
        assert_eq!(cfg.extraction.learning_rate, 1e-4);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let toml = format!("{}negativs_per_type = 4\n", minimal_toml());
        assert!(ExperimentConfig::from_toml_str(&toml).is_err());
        let nested = format!("{}[finetune]\nlearning_rte = 0.1\n", minimal_toml());
        assert!(ExperimentConfig::from_toml_str(&nested).is_err());
    }

    #[test]
    fn wrong_schema_version_is_an_error() {
        let toml = minimal_toml().replace("schema_version = 1", "schema_version = 9");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&toml),
            Err(ConfigError::SchemaVersion { found: 9, .. })
        ));
    }

    #[test]
    fn validation_catches_bad_values() {
        for (needle, replacement) in [
            ("out_dir = \"out\"\n", "out_dir = \"out\"\nratio = 1.5\n"),
            ("out_dir = \"out\"\n", "out_dir = \"out\"\nextraction_seeds = []\n"),
            ("out_dir = \"out\"\n", "out_dir = \"out\"\nextraction_seeds = [1, 1]\n"),
            ("out_dir = \"out\"\n", "out_dir = \"out\"\nworkers = 0\n"),
            ("out_dir = \"out\"\n", "out_dir = \"out\"\nsnapshot_fraction = 0.0\n"),
        ] {
            let toml = minimal_toml().replace(needle, replacement);
            assert!(ExperimentConfig::from_toml_str(&toml).is_err(), "{replacement}");
        }
    }

    #[test]
    fn inference_type_mask_parses_and_rejects_gold() {
        let toml = format!(
            "{}[taskgen]\ninference_types = [\"h_r_*\", \"*_r_t\"]\n",
            minimal_toml()
        );
        let cfg = ExperimentConfig::from_toml_str(&toml).unwrap();
        assert_eq!(cfg.taskgen.inference_types.len(), 2);
        let bad = format!("{}[taskgen]\ninference_types = [\"gold\"]\n", minimal_toml());
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }
}
