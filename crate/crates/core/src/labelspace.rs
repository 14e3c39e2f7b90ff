//! Mapping raw model output onto the label space.
//!
//! Chat models are instructed to answer with `<index> <name>` or `-1 Unknown`.
//! In practice they sometimes drop the number, pad the answer with prose, or
//! echo a different name than the number they chose. [`parse_prediction`]
//! resolves all of these with a fixed rule cascade and never fails.

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;

/// Canonical form of a label name: trimmed, lowercased, with whitespace and
/// hyphen runs collapsed to a single underscore and surrounding punctuation
/// removed. `"  Top-Up   Failed "` becomes `"top_up_failed"`.
pub fn canonicalize(label_text: &str) -> String {
    let lowered = label_text.trim().to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut in_separator = false;
    for ch in lowered.chars() {
        if ch.is_whitespace() || ch == '-' || ch == '_' {
            in_separator = true;
            continue;
        }
        if in_separator && !out.is_empty() {
            out.push('_');
        }
        in_separator = false;
        out.push(ch);
    }
    out.trim_matches(|c: char| !c.is_alphanumeric()).to_string()
}

/// Outcome of parsing one model response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Outcome {
    Label(usize),
    Unknown,
}

impl Outcome {
    pub fn label(self) -> Option<usize> {
        match self {
            Outcome::Label(i) => Some(i),
            Outcome::Unknown => None,
        }
    }
}

/// Which rule of the cascade produced the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseRule {
    /// Leading integer inside `[0, C)`.
    IndexMatch,
    /// Explicit `-1` or `unknown` answer.
    UnknownMarker,
    /// Whole answer canonicalizes to a label name.
    ExactName,
    /// Exactly one label name occurs inside the answer.
    UniqueSubstring,
    /// Nothing matched.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub outcome: Outcome,
    pub raw_text: String,
    pub parse_rule: ParseRule,
    /// Set when the leading index won over a different label name that
    /// followed it in the answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflicting_name: Option<usize>,
}

/// Splits a leading (optionally negative) integer off `text`. The integer
/// must be followed by the end of input or a non-alphanumeric character.
fn leading_integer(text: &str) -> Option<(i64, &str)> {
    let bytes = text.as_bytes();
    let mut end = usize::from(bytes.first() == Some(&b'-'));
    let digits_start = end;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == digits_start {
        return None;
    }
    let rest = &text[end..];
    if rest.chars().next().is_some_and(char::is_alphanumeric) {
        return None;
    }
    text[..end].parse().ok().map(|v| (v, rest))
}

/// Resolves a raw model answer against `label_set`. Total: every input maps
/// to a label or to Unknown.
pub fn parse_prediction(raw: &str, label_set: &LabelSet) -> Prediction {
    let trimmed = raw.trim();
    let make = |outcome, parse_rule, conflicting_name| Prediction {
        outcome,
        raw_text: raw.to_string(),
        parse_rule,
        conflicting_name,
    };

    if let Some((value, rest)) = leading_integer(trimmed) {
        if value >= 0 && (value as u64) < label_set.len() as u64 {
            let index = value as usize;
            let named = label_set.index_of(&canonicalize(rest));
            let conflict = named.filter(|&n| n != index);
            return make(Outcome::Label(index), ParseRule::IndexMatch, conflict);
        }
        if value == -1 {
            return make(Outcome::Unknown, ParseRule::UnknownMarker, None);
        }
    }

    let canonical = canonicalize(trimmed);
    if canonical == "unknown" || canonical.starts_with("unknown_") {
        return make(Outcome::Unknown, ParseRule::UnknownMarker, None);
    }
    if let Some(index) = label_set.index_of(&canonical) {
        return make(Outcome::Label(index), ParseRule::ExactName, None);
    }

    let mut hits = label_set
        .names()
        .iter()
        .enumerate()
        .filter(|(_, name)| !name.is_empty() && canonical.contains(name.as_str()));
    match (hits.next(), hits.next()) {
        (Some((index, _)), None) => make(Outcome::Label(index), ParseRule::UniqueSubstring, None),
        _ => make(Outcome::Unknown, ParseRule::Fallback, None),
    }
}
