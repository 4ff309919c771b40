//! Post-hoc dataset measurement.

mod contamination;
mod tags;

use std::path::Path;

use crate::data_model::{load_dataset, DatasetError};

pub use contamination::{
    check_against, contamination_check, instruction_text, ContaminationReport, NgramIndex, Tokenizer,
    STANDARD_NGRAM_SIZES,
};
pub use tags::{
    default_tagging_template, load_tag_file, metrics_from_tags, parse_tagger_output, tag_metrics_precomputed,
    tag_vocabulary, tag_with_gateway, DiversityMode, TagError, TagMetrics, PHASE_TAGGING,
};

/// Reads benchmark test items: a `.jsonl` dataset (user turns of each record)
/// or plain text with one item per non-empty line.
pub fn load_test_set(path: impl AsRef<Path>) -> Result<Vec<String>, DatasetError> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok(load_dataset(path)?.iter().map(instruction_text).collect());
    }
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Fixed-width table of contamination results.
pub fn render_contamination_table(reports: &[ContaminationReport]) -> String {
    let mut out = format!("{:<8} {:>10} {:>10} {:>9}\n", "n-gram", "matched", "total", "rate");
    for r in reports {
        let rate = if r.total_size == 0 {
            0.0
        } else {
            r.match_count as f64 / r.total_size as f64
        };
        out.push_str(&format!(
            "{:<8} {:>10} {:>10} {:>8.2}%\n",
            r.n,
            r.match_count,
            r.total_size,
            rate * 100.0
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_set_formats() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("t.txt");
        std::fs::write(&txt, "first item\n\n  second item \n").unwrap();
        assert_eq!(load_test_set(&txt).unwrap(), ["first item", "second item"]);
        let jsonl = dir.path().join("t.jsonl");
        std::fs::write(&jsonl, "{\"id\":\"a\",\"turns\":[{\"role\":\"user\",\"text\":\"q one\"}]}\n").unwrap();
        assert_eq!(load_test_set(&jsonl).unwrap(), ["q one"]);
    }

    #[test]
    fn table_layout() {
        let table = render_contamination_table(&[ContaminationReport {
            n: 13,
            matched_ids: vec!["a".into()],
            match_count: 1,
            total_size: 4,
        }]);
        assert!(table.lines().nth(1).unwrap().contains("25.00%"));
    }
}
