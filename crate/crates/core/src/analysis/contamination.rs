//! N-gram overlap between evolved data and benchmark test items.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::data_model::InstructionRecord;

/// Token n-gram sizes reported by default.
pub const STANDARD_NGRAM_SIZES: [usize; 2] = [13, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub lowercase: bool,
    /// Replace every character that is neither alphanumeric nor whitespace
    /// with a space before splitting.
    pub strip_punctuation: bool,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let cleaned: String = if self.strip_punctuation {
            text.chars()
                .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
                .collect()
        } else {
            text.to_string()
        };
        let cleaned = if self.lowercase { cleaned.to_lowercase() } else { cleaned };
        cleaned.split_whitespace().map(String::from).collect()
    }
}

fn fingerprint(gram: &[String]) -> u64 {
    let mut h = DefaultHasher::new();
    gram.hash(&mut h);
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub n: usize,
    pub matched_ids: Vec<String>,
    pub match_count: usize,
    pub total_size: usize,
}

/// Fingerprints of every n-gram in a test set.
#[derive(Debug, Clone)]
pub struct NgramIndex {
    n: usize,
    tokenizer: Tokenizer,
    grams: HashSet<u64>,
}

impl NgramIndex {
    pub fn new(n: usize, tokenizer: Tokenizer) -> Self {
        assert!(n >= 1, "n-gram size must be at least 1");
        Self {
            n,
            tokenizer,
            grams: HashSet::new(),
        }
    }

    pub fn build<S: AsRef<str>>(n: usize, tokenizer: Tokenizer, test_set: &[S]) -> Self {
        let mut index = Self::new(n, tokenizer);
        for item in test_set {
            index.insert(item.as_ref());
        }
        index
    }

    pub fn insert(&mut self, text: &str) {
        let tokens = self.tokenizer.tokenize(text);
        self.grams.extend(tokens.windows(self.n).map(fingerprint));
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    /// True if any n-gram of `text` occurs in the index.
    pub fn matches(&self, text: &str) -> bool {
        let tokens = self.tokenizer.tokenize(text);
        tokens.windows(self.n).any(|w| self.grams.contains(&fingerprint(w)))
    }
}

/// The text checked for a record: each user turn on its own line, so
/// n-grams never straddle turns.
pub fn instruction_text(record: &InstructionRecord) -> String {
    record.user_turns().collect::<Vec<_>>().join("\n")
}

fn record_matches(index: &NgramIndex, record: &InstructionRecord) -> bool {
    record.user_turns().any(|turn| index.matches(turn))
}

pub fn contamination_check<S: AsRef<str>>(
    evolved: &[InstructionRecord],
    test_set: &[S],
    n: usize,
    tokenizer: Tokenizer,
) -> ContaminationReport {
    let index = NgramIndex::build(n, tokenizer, test_set);
    check_against(&index, evolved)
}

pub fn check_against(index: &NgramIndex, evolved: &[InstructionRecord]) -> ContaminationReport {
    let matched_ids: Vec<String> = evolved
        .iter()
        .filter(|r| record_matches(index, r))
        .map(|r| r.id.clone())
        .collect();
    ContaminationReport {
        n: index.n(),
        match_count: matched_ids.len(),
        matched_ids,
        total_size: evolved.len(),
    }
}
