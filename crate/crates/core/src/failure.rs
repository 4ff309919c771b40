//! Lexical rules that flag an evolution as failed from the response the
//! evol LLM gave to the evolved instruction.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FailureError {
    #[error("failure rate needs a non-empty dev set")]
    EmptyDevSet,
    #[error("got {verdicts} verdicts for a dev set of {dev_size}")]
    LengthMismatch { verdicts: usize, dev_size: usize },
    #[error("cannot load rule set {path}: {message}")]
    RuleSet { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    StagnantComplexity,
    InsufficientQualification,
    LossOfKeyInformation,
    /// No response was obtained for the evolved instruction.
    NoResponse,
    None,
}

impl fmt::Display for FailureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureCategory::StagnantComplexity => "stagnant_complexity",
            FailureCategory::InsufficientQualification => "insufficient_qualification",
            FailureCategory::LossOfKeyInformation => "loss_of_key_information",
            FailureCategory::NoResponse => "no_response",
            FailureCategory::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureVerdict {
    pub failed: bool,
    pub category: FailureCategory,
    pub matched_rule: String,
}

impl FailureVerdict {
    pub fn success() -> Self {
        Self {
            failed: false,
            category: FailureCategory::None,
            matched_rule: String::new(),
        }
    }

    /// Verdict used when no response could be obtained at all.
    pub fn gateway_failure(message: &str) -> Self {
        Self {
            failed: true,
            category: FailureCategory::NoResponse,
            matched_rule: format!("no response: {message}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    /// Normalized response starts with a pattern and its last character is `?`.
    PrefixQuestion,
    /// Normalized response contains a pattern anywhere.
    Substring,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRule {
    pub category: FailureCategory,
    pub kind: MatchKind,
    pub patterns: Vec<String>,
}

/// Ordered rule list; the first matching rule decides the verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub rules: Vec<FailureRule>,
}

impl Default for RuleSet {
    fn default() -> Self {
        let rule = |category, kind, patterns: &[&str]| FailureRule {
            category,
            kind,
            patterns: patterns.iter().map(|p| p.to_string()).collect(),
        };
        Self {
            rules: vec![
                rule(
                    FailureCategory::StagnantComplexity,
                    MatchKind::PrefixQuestion,
                    &["understood", "what", "that is correct", "thank you", "great"],
                ),
                rule(
                    FailureCategory::InsufficientQualification,
                    MatchKind::PrefixQuestion,
                    &["sure"],
                ),
                rule(
                    FailureCategory::LossOfKeyInformation,
                    MatchKind::Substring,
                    &["please provide"],
                ),
            ],
        }
    }
}

const QUOTES: &[char] = &['"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}'];

fn normalize(response: &str) -> String {
    response
        .trim()
        .trim_matches(|c: char| c.is_whitespace() || QUOTES.contains(&c))
        .to_lowercase()
}

impl RuleSet {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, FailureError> {
        let path = path.as_ref();
        let err = |message: String| FailureError::RuleSet {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut set: RuleSet = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if set
            .rules
            .iter()
            .any(|r| matches!(r.category, FailureCategory::None | FailureCategory::NoResponse))
        {
            return Err(err("rules must use a lexical failure category".into()));
        }
        for rule in &mut set.rules {
            for p in &mut rule.patterns {
                *p = p.to_lowercase();
            }
        }
        Ok(set)
    }

    pub fn classify(&self, response: &str) -> FailureVerdict {
        let text = normalize(response);
        let is_question = text.ends_with('?');
        for rule in &self.rules {
            let hit = rule.patterns.iter().find(|p| match rule.kind {
                MatchKind::PrefixQuestion => is_question && text.starts_with(p.as_str()),
                MatchKind::Substring => text.contains(p.as_str()),
            });
            if let Some(pattern) = hit {
                let matched_rule = match rule.kind {
                    MatchKind::PrefixQuestion => format!("begins with {pattern:?}, ends with \"?\""),
                    MatchKind::Substring => format!("contains {pattern:?}"),
                };
                return FailureVerdict {
                    failed: true,
                    category: rule.category,
                    matched_rule,
                };
            }
        }
        FailureVerdict::success()
    }
}

/// Classifies with the default rule set.
pub fn classify(response: &str) -> FailureVerdict {
    RuleSet::default().classify(response)
}

/// Fraction of failed verdicts over the dev set size.
pub fn failure_rate(verdicts: &[FailureVerdict], dev_size: usize) -> Result<f64, FailureError> {
    if dev_size == 0 {
        return Err(FailureError::EmptyDevSet);
    }
    if verdicts.len() != dev_size {
        return Err(FailureError::LengthMismatch {
            verdicts: verdicts.len(),
            dev_size,
        });
    }
    let failed = verdicts.iter().filter(|v| v.failed).count();
    Ok(failed as f64 / dev_size as f64)
}
