//! Scripted backend for offline runs and tests.
//!
//! A script is an ordered list of rules. The first rule whose matchers all
//! hold for a request answers it:
//!
//! ```json
//! {"rules": [
//!   {"role": "evol", "regex": "#Instruction#:\\s*(.*)", "responses": ["#Finally Rewritten Instruction#\nEVOLVED: {1}"]},
//!   {"role": "responder", "contains": "refund", "responses": ["Sure, which order?"]},
//!   {"role": "responder", "responses": ["The answer is 4."]}
//! ]}
//! ```
//!
//! Responses may reference `{prompt}` (the whole user prompt) and `{1}`..`{9}`
//! (regex capture groups). A rule walks through its `responses` in call
//! order and then repeats the last one, or wraps around with `"cycle": true`.
//! Rules that only use placeholders with a single response are pure
//! functions of the request and therefore safe under concurrency.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Backend, BackendError, GenerationRequest, RoleTag};

#[derive(Debug, Error)]
pub enum MockScriptError {
    #[error("cannot read mock script {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid mock script: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<RoleTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default)]
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub cycle: bool,
    /// Number of leading matches answered with a transient error.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub transient_failures: u64,
    /// When set, every match fails with this non-retryable error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fatal: Option<String>,
}

fn is_zero(n: &u64) -> bool {
    *n == 0
}

impl MockRule {
    pub fn reply(role: RoleTag, response: impl Into<String>) -> Self {
        Self {
            role: Some(role),
            responses: vec![response.into()],
            ..Self::default()
        }
    }

    pub fn contains(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn regex(mut self, pattern: impl Into<String>) -> Self {
        self.regex = Some(pattern.into());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self { rules }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, MockScriptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MockScriptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| MockScriptError::Invalid(format!("{}: {e}", path.display())))
    }

    /// Rules of `other` are tried after this script's rules.
    pub fn extend(&mut self, other: MockScript) {
        self.rules.extend(other.rules);
    }
}

struct CompiledRule {
    rule: MockRule,
    regex: Option<Regex>,
    hits: AtomicU64,
}

/// Deterministic backend that answers from a [`MockScript`].
pub struct MockBackend {
    rules: Vec<CompiledRule>,
    log: Mutex<Vec<GenerationRequest>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, MockScriptError> {
        let rules = script
            .rules
            .into_iter()
            .enumerate()
            .map(|(i, rule)| {
                if rule.responses.is_empty() && rule.fatal.is_none() {
                    return Err(MockScriptError::Invalid(format!("rule {i} has no responses")));
                }
                let regex = rule
                    .regex
                    .as_deref()
                    .map(Regex::new)
                    .transpose()
                    .map_err(|e| MockScriptError::Invalid(format!("rule {i}: {e}")))?;
                Ok(CompiledRule {
                    rule,
                    regex,
                    hits: AtomicU64::new(0),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            rules,
            log: Mutex::new(Vec::new()),
        })
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }
}

fn expand(template: &str, prompt: &str, captures: Option<&regex::Captures<'_>>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let key = close.map(|c| &after[..c]);
        let value = match key {
            Some("prompt") => Some(prompt.to_string()),
            Some(k) if k.len() == 1 && k.as_bytes()[0].is_ascii_digit() => {
                let idx = usize::from(k.as_bytes()[0] - b'0');
                Some(
                    captures
                        .and_then(|c| c.get(idx))
                        .map(|m| m.as_str().to_string())
                        .unwrap_or_default(),
                )
            }
            _ => None,
        };
        match (value, close) {
            (Some(v), Some(c)) => {
                out.push_str(&v);
                rest = &after[c + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

impl Backend for MockBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.log.lock().expect("mock log poisoned").push(request.clone());
        let prompt = request.user_prompt.as_str();
        for compiled in &self.rules {
            let rule = &compiled.rule;
            if rule.role.is_some_and(|r| r != request.role_tag) {
                continue;
            }
            if rule.contains.as_deref().is_some_and(|needle| !prompt.contains(needle)) {
                continue;
            }
            let captures = match &compiled.regex {
                Some(re) => match re.captures(prompt) {
                    Some(c) => Some(c),
                    None => continue,
                },
                None => None,
            };
            let hit = compiled.hits.fetch_add(1, Ordering::SeqCst);
            if let Some(message) = &rule.fatal {
                return Err(BackendError::Fatal(message.clone()));
            }
            if hit < rule.transient_failures {
                return Err(BackendError::Transient(format!("scripted failure {}", hit + 1)));
            }
            let n = (hit - rule.transient_failures) as usize;
            let len = rule.responses.len();
            let idx = if n < len {
                n
            } else if rule.cycle {
                n % len
            } else {
                len - 1
            };
            return Ok(expand(&rule.responses[idx], prompt, captures.as_ref()));
        }
        Err(BackendError::Fatal(format!(
            "no mock rule matches {} request: {:.60}",
            request.role_tag, prompt
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, GatewayError, RetryPolicy};
    use std::sync::Arc;

    fn backend(rules: Vec<MockRule>) -> MockBackend {
        MockBackend::new(MockScript::new(rules)).unwrap()
    }

    #[test]
    fn first_matching_rule_wins() {
        let b = backend(vec![
            MockRule::reply(RoleTag::Responder, "special").contains("refund"),
            MockRule::reply(RoleTag::Responder, "plain"),
        ]);
        let req = |p: &str| GenerationRequest::new(RoleTag::Responder, p);
        assert_eq!(b.complete(&req("about a refund")).unwrap(), "special");
        assert_eq!(b.complete(&req("other")).unwrap(), "plain");
        assert!(matches!(
            b.complete(&GenerationRequest::new(RoleTag::Evol, "x")),
            Err(BackendError::Fatal(_))
        ));
        assert_eq!(b.requests().len(), 3);
    }

    #[test]
    fn expands_captures_and_prompt() {
        let b = backend(vec![MockRule::reply(RoleTag::Evol, "[{1}] {prompt} {x} {12").regex(r"id=(\w+)")]);
        let out = b.complete(&GenerationRequest::new(RoleTag::Evol, "id=abc")).unwrap();
        assert_eq!(out, "[abc] id=abc {x} {12");
    }

    #[test]
    fn sequences_repeat_last_or_cycle() {
        let mut seq = MockRule::reply(RoleTag::Optimizer, "a");
        seq.responses.push("b".into());
        let mut cyc = seq.clone();
        cyc.cycle = true;
        cyc.role = Some(RoleTag::Tagger);
        let b = backend(vec![seq, cyc]);
        let run = |role| {
            (0..4)
                .map(|_| b.complete(&GenerationRequest::new(role, "q")).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(RoleTag::Optimizer), ["a", "b", "b", "b"]);
        assert_eq!(run(RoleTag::Tagger), ["a", "b", "a", "b"]);
    }

    #[test]
    fn scripted_failures_drive_retries() {
        let mut rule = MockRule::reply(RoleTag::Evol, "ok");
        rule.transient_failures = 2;
        let gw = Gateway::new(Arc::new(backend(vec![rule]))).with_retry(RetryPolicy::no_delay(3));
        assert_eq!(gw.generate(&GenerationRequest::new(RoleTag::Evol, "x"), "p").unwrap(), "ok");
        assert_eq!(gw.ledger().snapshot().retries, 2);

        let mut fatal = MockRule::reply(RoleTag::Evol, "unused");
        fatal.fatal = Some("400 bad request".into());
        let gw = Gateway::new(Arc::new(backend(vec![fatal]))).with_retry(RetryPolicy::no_delay(3));
        assert_eq!(
            gw.generate(&GenerationRequest::new(RoleTag::Evol, "x"), "p"),
            Err(GatewayError::Api("400 bad request".into()))
        );
    }

    #[test]
    fn rejects_bad_scripts() {
        assert!(MockBackend::new(MockScript::new(vec![MockRule {
            responses: vec![],
            ..MockRule::default()
        }]))
        .is_err());
        assert!(MockBackend::new(MockScript::new(vec![MockRule::reply(RoleTag::Evol, "x").regex("(")])).is_err());
    }

    #[test]
    fn script_json_roundtrip() {
        let json = r#"{"rules":[{"role":"evol","regex":"(.*)","responses":["E: {1}"]},{"responses":["any"],"cycle":true}]}"#;
        let script: MockScript = serde_json::from_str(json).unwrap();
        assert_eq!(script.rules.len(), 2);
        assert_eq!(script.rules[1].role, None);
        let back: MockScript = serde_json::from_str(&serde_json::to_string(&script).unwrap()).unwrap();
        assert_eq!(back, script);
    }
}
