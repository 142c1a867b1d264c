//! Natural-language templates for rendering fact triples.
//!
//! A template carries `[H]`, `[R]`, and `[T]` markers, each exactly once.
//! Packs map every relation to two or more paraphrase variants; the stock
//! pack is generated for an arbitrary relation set, and external packs load
//! from a JSONL file.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("malformed template record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("template {relation:?}/{variant} must contain marker {marker} exactly once")]
    MarkerCount {
        relation: String,
        variant: u32,
        marker: &'static str,
    },
    #[error("duplicate template variant {variant} for relation {relation:?}")]
    DuplicateVariant { relation: String, variant: u32 },
    #[error("no template covers relation {0:?}")]
    UncoveredRelation(String),
    #[error("template pack is empty")]
    Empty,
}

/// Lowercased, space-separated phrase for a relation identifier: camel-case
/// boundaries and `_`/`-` separators become spaces ("GraduatedFrom" →
/// "graduated from"); opaque ids like "P19" pass through lowercased.
pub fn relation_phrase(relation: &str) -> String {
    let mut words: Vec<String> = Vec::new();
    for chunk in relation.split(['_', '-', ' ']) {
        if chunk.is_empty() {
            continue;
        }
        let mut word = String::new();
        let mut prev_lower = false;
        for ch in chunk.chars() {
            if ch.is_uppercase() && prev_lower {
                words.push(std::mem::take(&mut word));
            }
            prev_lower = ch.is_lowercase();
            word.extend(ch.to_lowercase());
        }
        if !word.is_empty() {
            words.push(word);
        }
    }
    words.join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub relation: String,
    pub variant: u32,
    #[serde(rename = "template")]
    pub text: String,
}

impl Template {
    fn validate(&self) -> Result<(), TemplateError> {
        for marker in ["[H]", "[R]", "[T]"] {
            if self.text.matches(marker).count() != 1 {
                return Err(TemplateError::MarkerCount {
                    relation: self.relation.clone(),
                    variant: self.variant,
                    marker: match marker {
                        "[H]" => "[H]",
                        "[R]" => "[R]",
                        _ => "[T]",
                    },
                });
            }
        }
        Ok(())
    }

    pub fn render(&self, head: &str, relation_phrase: &str, tail: &str) -> String {
        tidy(&self
            .text
            .replace("[H]", head)
            .replace("[R]", relation_phrase)
            .replace("[T]", tail))
    }

    /// Render with the tail slot elided; used for queries.
    pub fn render_without_tail(&self, head: &str, relation_phrase: &str) -> String {
        tidy(&self
            .text
            .replace("[H]", head)
            .replace("[R]", relation_phrase)
            .replace("[T]", ""))
    }
}

/// Collapse whitespace and drop stray spaces before sentence punctuation
/// left behind by elided slots.
fn tidy(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() && !(word.len() == 1 && ".,;:!?".contains(word)) {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplatePack {
    by_relation: BTreeMap<String, Vec<Template>>,
    pub version: String,
}

impl TemplatePack {
    pub fn from_templates(
        templates: Vec<Template>,
        version: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        if templates.is_empty() {
            return Err(TemplateError::Empty);
        }
        let mut by_relation: BTreeMap<String, Vec<Template>> = BTreeMap::new();
        for template in templates {
            template.validate()?;
            let entry = by_relation.entry(template.relation.clone()).or_default();
            if entry.iter().any(|t| t.variant == template.variant) {
                return Err(TemplateError::DuplicateVariant {
                    relation: template.relation,
                    variant: template.variant,
                });
            }
            entry.push(template);
        }
        for entry in by_relation.values_mut() {
            entry.sort_by_key(|t| t.variant);
        }
        Ok(TemplatePack {
            by_relation,
            version: version.into(),
        })
    }

    /// Stock pack: three paraphrase variants per relation.
    pub fn default_for_relations(relations: &BTreeSet<String>) -> TemplatePack {
        let variants = [
            "[H] [R] [T] .",
            "it is known that [H] [R] [T] .",
            "according to the records , [H] [R] [T] .",
        ];
        let templates = relations
            .iter()
            .flat_map(|relation| {
                variants.iter().enumerate().map(move |(i, text)| Template {
                    relation: relation.clone(),
                    variant: i as u32,
                    text: (*text).to_string(),
                })
            })
            .collect();
        TemplatePack::from_templates(templates, "default-v1").expect("stock templates are valid")
    }

    /// Parse the JSONL form: one `{relation, template, variant}` per line.
    pub fn parse(input: &str) -> Result<TemplatePack, TemplateError> {
        let mut templates = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let template: Template =
                serde_json::from_str(line).map_err(|e| TemplateError::Malformed {
                    line: idx + 1,
                    reason: e.to_string(),
                })?;
            templates.push(template);
        }
        let mut hasher = Sha256::new();
        hasher.update(input.as_bytes());
        let digest = hasher.finalize();
        let version: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        TemplatePack::from_templates(templates, format!("file-{version}"))
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for templates in self.by_relation.values() {
            for template in templates {
                serde_json::to_writer(&mut out, template)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn templates(&self, relation: &str) -> &[Template] {
        self.by_relation
            .get(relation)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn relations(&self) -> impl Iterator<Item = &String> {
        self.by_relation.keys()
    }

    /// Every relation in `required` must have at least one template.
    pub fn check_covers(&self, required: &BTreeSet<String>) -> Result<(), TemplateError> {
        for relation in required {
            if self.templates(relation).is_empty() {
                return Err(TemplateError::UncoveredRelation(relation.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relation_phrases() {
        assert_eq!(relation_phrase("GraduatedFrom"), "graduated from");
        assert_eq!(relation_phrase("P19"), "p19");
        assert_eq!(relation_phrase("works_at"), "works at");
        assert_eq!(relation_phrase("CapitalOf"), "capital of");
    }

    #[test]
    fn stock_pack_has_paraphrase_variants() {
        let relations: BTreeSet<String> = ["CapitalOf".to_string()].into();
        let pack = TemplatePack::default_for_relations(&relations);
        assert!(pack.templates("CapitalOf").len() >= 2);
        pack.check_covers(&relations).unwrap();
    }

    #[test]
    fn render_fills_markers_and_tidies() {
        let template = Template {
            relation: "CapitalOf".into(),
            variant: 0,
            text: "[H] [R] [T] .".into(),
        };
        assert_eq!(
            template.render("Paris", "capital of", "France"),
            "Paris capital of France."
        );
        assert_eq!(
            template.render_without_tail("Paris", "capital of"),
            "Paris capital of."
        );
    }

    #[test]
    fn pack_round_trips_through_jsonl() {
        let relations: BTreeSet<String> = ["A".to_string(), "B".to_string()].into();
        let pack = TemplatePack::default_for_relations(&relations);
        let mut buf = Vec::new();
        pack.write(&mut buf).unwrap();
        let parsed = TemplatePack::parse(&String::from_utf8(buf).unwrap()).unwrap();
        assert_eq!(pack.by_relation, parsed.by_relation);
    }

    #[test]
    fn marker_rules_enforced() {
        let bad = Template {
            relation: "R".into(),
            variant: 0,
            text: "[H] [R] says [T] about [T] .".into(),
        };
        assert!(TemplatePack::from_templates(vec![bad], "x").is_err());
        let missing = Template {
            relation: "R".into(),
            variant: 0,
            text: "[H] and [T] .".into(),
        };
        assert!(TemplatePack::from_templates(vec![missing], "x").is_err());
    }

    #[test]
    fn duplicate_variant_rejected() {
        let a = Template {
            relation: "R".into(),
            variant: 0,
            text: "[H] [R] [T] .".into(),
        };
        let b = Template {
            relation: "R".into(),
            variant: 0,
            text: "so [H] [R] [T] .".into(),
        };
        assert!(matches!(
            TemplatePack::from_templates(vec![a, b], "x"),
            Err(TemplateError::DuplicateVariant { .. })
        ));
    }
}
