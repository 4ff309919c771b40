//! Tag-based complexity and diversity of a dataset.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::InstructionRecord;
use crate::gateway::{Gateway, GenerationRequest, RoleTag};
use crate::templates::{PromptTemplate, TemplateName};

pub const PHASE_TAGGING: &str = "tagging";

#[derive(Debug, Error)]
pub enum TagError {
    #[error("cannot read tag file {path}: {message}")]
    Io { path: String, message: String },
    #[error("tag file {path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMode {
    /// Distinct tags across the whole dataset divided by the record count.
    #[default]
    DatasetDistinct,
    /// Mean number of distinct tags per record.
    PerRecordUnique,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagMetrics {
    pub complexity: f64,
    pub diversity: f64,
    pub diversity_mode: DiversityMode,
    pub per_record_tags: BTreeMap<String, Vec<String>>,
    /// Ids whose tagger output could not be parsed.
    pub warnings: Vec<String>,
}

/// Computes complexity (mean tag count) and diversity from per-record tags.
pub fn metrics_from_tags(tags: &BTreeMap<String, Vec<String>>, mode: DiversityMode) -> TagMetrics {
    let n = tags.len();
    let (complexity, diversity) = if n == 0 {
        (0.0, 0.0)
    } else {
        let total: usize = tags.values().map(Vec::len).sum();
        let diversity = match mode {
            DiversityMode::DatasetDistinct => {
                let distinct: HashSet<&str> = tags.values().flatten().map(String::as_str).collect();
                distinct.len() as f64 / n as f64
            }
            DiversityMode::PerRecordUnique => {
                let per_record: usize = tags
                    .values()
                    .map(|t| t.iter().collect::<HashSet<_>>().len())
                    .sum();
                per_record as f64 / n as f64
            }
        };
        (total as f64 / n as f64, diversity)
    };
    TagMetrics {
        complexity,
        diversity,
        diversity_mode: mode,
        per_record_tags: tags.clone(),
        warnings: Vec::new(),
    }
}

/// Reads tags from a JSON array in `output`, tolerating surrounding prose
/// and code fences. Returns `None` when no array of strings can be found.
pub fn parse_tagger_output(output: &str) -> Option<Vec<String>> {
    let start = output.find('[')?;
    let end = output.rfind(']')?;
    if end < start {
        return None;
    }
    let values: Vec<serde_json::Value> = serde_json::from_str(&output[start..=end]).ok()?;
    values
        .into_iter()
        .map(|v| match v {
            serde_json::Value::String(s) => Some(s.trim().to_string()),
            serde_json::Value::Object(o) => o.get("tag").and_then(|t| t.as_str()).map(|s| s.trim().to_string()),
            _ => None,
        })
        .collect::<Option<Vec<_>>>()
        .map(|tags| tags.into_iter().filter(|t| !t.is_empty()).collect())
}

#[derive(Deserialize)]
struct TagLine {
    id: String,
    tags: Vec<String>,
}

/// Loads a sidecar tag file: JSONL lines `{"id": ..., "tags": [...]}`.
pub fn load_tag_file(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<String>>, TagError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| TagError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TagLine = serde_json::from_str(line).map_err(|e| TagError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(parsed.id, parsed.tags);
    }
    Ok(out)
}

/// Tags every record with the tagger role and aggregates the metrics.
pub fn tag_with_gateway(
    records: &[InstructionRecord],
    gateway: &Gateway,
    template: &PromptTemplate,
    mode: DiversityMode,
) -> TagMetrics {
    let results = gateway.map_bounded(records, |record| {
        let prompt = template
            .render_with(&[("instruction", record.final_instruction())])
            .ok()?;
        let request = GenerationRequest::new(RoleTag::Tagger, prompt).max_tokens(512);
        let output = gateway.generate(&request, PHASE_TAGGING).ok()?;
        parse_tagger_output(&output)
    });
    let mut tags = BTreeMap::new();
    let mut warnings = Vec::new();
    for (record, parsed) in records.iter().zip(results) {
        match parsed {
            Some(t) => {
                tags.insert(record.id.clone(), t);
            }
            None => {
                tracing::warn!(record = %record.id, "tagger output unusable; using no tags");
                warnings.push(record.id.clone());
                tags.insert(record.id.clone(), Vec::new());
            }
        }
    }
    let mut metrics = metrics_from_tags(&tags, mode);
    metrics.warnings = warnings;
    metrics
}

/// Metrics for `records` from precomputed tags; records missing from the
/// tag map count as untagged.
pub fn tag_metrics_precomputed(
    records: &[InstructionRecord],
    tags: &BTreeMap<String, Vec<String>>,
    mode: DiversityMode,
) -> TagMetrics {
    let mut selected = BTreeMap::new();
    let mut warnings = Vec::new();
    for r in records {
        match tags.get(&r.id) {
            Some(t) => {
                selected.insert(r.id.clone(), t.clone());
            }
            None => {
                warnings.push(r.id.clone());
                selected.insert(r.id.clone(), Vec::new());
            }
        }
    }
    let mut metrics = metrics_from_tags(&selected, mode);
    metrics.warnings = warnings;
    metrics
}

/// Shipped tagging template.
pub fn default_tagging_template() -> PromptTemplate {
    PromptTemplate::shipped(TemplateName::Tagging)
}

/// Distinct tags across the dataset, sorted.
pub fn tag_vocabulary(metrics: &TagMetrics) -> BTreeSet<&str> {
    metrics.per_record_tags.values().flatten().map(String::as_str).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockRule, MockScript};
    use std::sync::Arc;

    fn tags(spec: &[&[&str]]) -> BTreeMap<String, Vec<String>> {
        spec.iter()
            .enumerate()
            .map(|(i, t)| (format!("r{i}"), t.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    #[test]
    fn direct_arithmetic() {
        let m = metrics_from_tags(&tags(&[&["a", "b"], &["a"]]), DiversityMode::DatasetDistinct);
        assert_eq!((m.complexity, m.diversity), (1.5, 1.0));
    }

    #[test]
    fn shared_single_tag() {
        let m = metrics_from_tags(&tags(&[&["x"], &["x"], &["x"], &["x"]]), DiversityMode::DatasetDistinct);
        assert_eq!((m.complexity, m.diversity), (1.0, 0.25));
    }

    #[test]
    fn empty_input_is_zero() {
        let m = metrics_from_tags(&BTreeMap::new(), DiversityMode::DatasetDistinct);
        assert_eq!((m.complexity, m.diversity), (0.0, 0.0));
    }

    #[test]
    fn per_record_mode() {
        let m = metrics_from_tags(&tags(&[&["a", "a", "b"], &["c"]]), DiversityMode::PerRecordUnique);
        assert_eq!((m.complexity, m.diversity), (2.0, 1.5));
    }

    #[test]
    fn lenient_parsing() {
        assert_eq!(parse_tagger_output(r#"["math", "logic"]"#), Some(vec!["math".into(), "logic".into()]));
        assert_eq!(
            parse_tagger_output("Tags:\n```json\n[\"a\", {\"tag\": \"b\"}]\n```"),
            Some(vec!["a".into(), "b".into()])
        );
        assert_eq!(parse_tagger_output("no tags here"), None);
        assert_eq!(parse_tagger_output("[1, 2]"), None);
        assert_eq!(parse_tagger_output("] oops ["), None);
    }

    #[test]
    fn tagger_calls_and_warnings() {
        let backend = MockBackend::new(MockScript::new(vec![
            MockRule::reply(RoleTag::Tagger, "I cannot tag this.").contains("weird"),
            MockRule::reply(RoleTag::Tagger, r#"["math", "arithmetic"]"#),
        ]))
        .unwrap();
        let gw = Gateway::new(Arc::new(backend));
        let records = vec![
            InstructionRecord::seed("a", "add numbers", ""),
            InstructionRecord::seed("b", "weird one", ""),
        ];
        let m = tag_with_gateway(&records, &gw, &default_tagging_template(), DiversityMode::DatasetDistinct);
        assert_eq!(gw.ledger().snapshot().role(RoleTag::Tagger), 2);
        assert_eq!(m.warnings, ["b"]);
        assert_eq!(m.per_record_tags["b"], Vec::<String>::new());
        assert_eq!((m.complexity, m.diversity), (1.0, 1.0));
        assert_eq!(tag_vocabulary(&m).into_iter().collect::<Vec<_>>(), ["arithmetic", "math"]);
    }

    #[test]
    fn sidecar_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tags.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"tags\":[\"x\",\"y\"]}\n\n{\"id\":\"b\",\"tags\":[]}\n").unwrap();
        let t = load_tag_file(&path).unwrap();
        assert_eq!(t.len(), 2);
        let records = vec![
            InstructionRecord::seed("a", "q", ""),
            InstructionRecord::seed("b", "q", ""),
            InstructionRecord::seed("c", "q", ""),
        ];
        let m = tag_metrics_precomputed(&records, &t, DiversityMode::DatasetDistinct);
        assert_eq!(m.warnings, ["c"]);
        assert!((m.complexity - 2.0 / 3.0).abs() < 1e-12);
        std::fs::write(&path, "{\"id\":1}\n").unwrap();
        assert!(matches!(load_tag_file(&path), Err(TagError::Parse { line: 1, .. })));
    }
}
