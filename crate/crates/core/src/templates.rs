//! Prompt templates with `{name}` placeholders.
//!
//! A placeholder is `{` + an identifier (`[A-Za-z_][A-Za-z0-9_]*`) + `}`.
//! Rendering substitutes bound placeholders in a single pass; placeholders
//! that are neither bound nor required are left as literal text, so method
//! texts may contain braces of their own (`{x}` in a math problem, JSON).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default heading that precedes the final evolved instruction.
pub const DEFAULT_MARKER: &str = "#Finally Rewritten Instruction#";

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("missing binding for placeholder {0:?}")]
    MissingPlaceholder(String),
    #[error("template {name} does not contain required placeholder {placeholder:?}")]
    PlaceholderNotInBody { name: String, placeholder: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
    #[error("unknown template name {0:?}")]
    UnknownName(String),
    #[error("evolution output is empty after extraction")]
    EmptyEvolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    InitialMethod,
    WeakInitialMethod,
    TrajectoryAnalysis,
    MethodOptimization,
    ResponseGeneration,
    Tagging,
}

impl TemplateName {
    pub const ALL: [TemplateName; 6] = [
        TemplateName::InitialMethod,
        TemplateName::WeakInitialMethod,
        TemplateName::TrajectoryAnalysis,
        TemplateName::MethodOptimization,
        TemplateName::ResponseGeneration,
        TemplateName::Tagging,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::InitialMethod => "initial_method",
            TemplateName::WeakInitialMethod => "weak_initial_method",
            TemplateName::TrajectoryAnalysis => "trajectory_analysis",
            TemplateName::MethodOptimization => "method_optimization",
            TemplateName::ResponseGeneration => "response_generation",
            TemplateName::Tagging => "tagging",
        }
    }

    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateName::InitialMethod
            | TemplateName::WeakInitialMethod
            | TemplateName::ResponseGeneration
            | TemplateName::Tagging => &["instruction"],
            TemplateName::TrajectoryAnalysis => &["trajectory"],
            TemplateName::MethodOptimization => &["method", "feedback", "marker"],
        }
    }

    fn shipped_body(self) -> &'static str {
        match self {
            TemplateName::InitialMethod => include_str!("../../../prompts/initial_method.txt"),
            TemplateName::WeakInitialMethod => include_str!("../../../prompts/weak_initial_method.txt"),
            TemplateName::TrajectoryAnalysis => include_str!("../../../prompts/trajectory_analysis.txt"),
            TemplateName::MethodOptimization => include_str!("../../../prompts/method_optimization.txt"),
            TemplateName::ResponseGeneration => include_str!("../../../prompts/response_generation.txt"),
            TemplateName::Tagging => include_str!("../../../prompts/tagging.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| TemplateError::UnknownName(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// Splits a body into literal text and `{identifier}` placeholders.
fn parse_segments(body: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        literal.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .char_indices()
            .take_while(|&(i, c)| c == '_' || c.is_ascii_alphabetic() || (i > 0 && c.is_ascii_digit()))
            .count();
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            if !literal.is_empty() {
                segments.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            segments.push(Segment::Placeholder(after[..ident_len].to_string()));
            rest = &after[ident_len + 1..];
        } else {
            literal.push('{');
            rest = after;
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

/// Names of all placeholders occurring in `body`, in first-occurrence order.
pub fn placeholders_in(body: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    parse_segments(body)
        .into_iter()
        .filter_map(|s| match s {
            Segment::Placeholder(p) if seen.insert(p.clone()) => Some(p),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    body: String,
    required: BTreeSet<String>,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    /// Builds a template; every required placeholder must occur in the body.
    pub fn new<I, S>(name: impl Into<String>, body: impl Into<String>, required: I) -> Result<Self, TemplateError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let name = name.into();
        let body = body.into();
        let segments = parse_segments(&body);
        let required: BTreeSet<String> = required.into_iter().map(Into::into).collect();
        for r in &required {
            let present = segments
                .iter()
                .any(|s| matches!(s, Segment::Placeholder(p) if p == r));
            if !present {
                return Err(TemplateError::PlaceholderNotInBody {
                    name,
                    placeholder: r.clone(),
                });
            }
        }
        Ok(Self {
            name,
            body,
            required,
            segments,
        })
    }

    /// The template as shipped with the crate.
    pub fn shipped(name: TemplateName) -> Self {
        Self::new(
            name.as_str(),
            strip_final_newline(name.shipped_body()),
            name.required_placeholders().iter().copied(),
        )
        .expect("shipped templates are valid")
    }

    /// Loads `<dir>/<name>.txt`, falling back to the shipped text when the
    /// file does not exist.
    pub fn load(dir: Option<&Path>, name: TemplateName) -> Result<Self, TemplateError> {
        let Some(dir) = dir else {
            return Ok(Self::shipped(name));
        };
        let path = dir.join(format!("{}.txt", name.as_str()));
        if !path.exists() {
            return Ok(Self::shipped(name));
        }
        let body = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::new(
            name.as_str(),
            strip_final_newline(&body),
            name.required_placeholders().iter().copied(),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn required_placeholders(&self) -> &BTreeSet<String> {
        &self.required
    }

    pub fn render(&self, bindings: &HashMap<&str, &str>) -> Result<String, TemplateError> {
        if let Some(missing) = self.required.iter().find(|r| !bindings.contains_key(r.as_str())) {
            return Err(TemplateError::MissingPlaceholder(missing.clone()));
        }
        let mut out = String::with_capacity(self.body.len());
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder(name) => match bindings.get(name.as_str()) {
                    Some(value) => out.push_str(value),
                    None => {
                        out.push('{');
                        out.push_str(name);
                        out.push('}');
                    }
                },
            }
        }
        Ok(out)
    }

    /// Convenience wrapper over [`render`](Self::render) for slices of pairs.
    pub fn render_with(&self, pairs: &[(&str, &str)]) -> Result<String, TemplateError> {
        self.render(&pairs.iter().copied().collect())
    }
}

fn strip_final_newline(s: &str) -> &str {
    s.strip_suffix("\r\n").or_else(|| s.strip_suffix('\n')).unwrap_or(s)
}

/// Result of pulling the final instruction out of a staged evolution output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub text: String,
    /// Set when the marker was absent and the whole output was used.
    pub format_warning: bool,
}

/// Returns the text after the last occurrence of `marker`, trimmed. A single
/// leading `:` left over from a "Heading:" style line is dropped. Without a
/// marker the whole output is returned with `format_warning` set.
pub fn extract_final_instruction(evol_output: &str, marker: &str) -> Result<Extracted, TemplateError> {
    let (tail, format_warning) = match (!marker.is_empty()).then(|| evol_output.rfind(marker)).flatten() {
        Some(pos) => {
            let tail = evol_output[pos + marker.len()..].trim_start();
            (tail.strip_prefix(':').unwrap_or(tail), false)
        }
        None => (evol_output, true),
    };
    let text = tail.trim();
    if text.is_empty() {
        return Err(TemplateError::EmptyEvolution);
    }
    Ok(Extracted {
        text: text.to_string(),
        format_warning,
    })
}
