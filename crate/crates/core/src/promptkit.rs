//! Classification prompt rendering.
//!
//! A template is plain text with three markers. Everything before the line
//! holding `{{query}}` becomes the system message; that line and anything
//! after it become the final user message.
//!
//! * `{{classes}}` expands to `<index> <name>` lines in label order.
//! * `{{examples}}` expands to a blank line, the examples header, and one
//!   `<text> <label>` line per exemplar, or to nothing when the exemplars
//!   travel as chat history (or there are none).
//! * `{{query}}` expands to the text being classified.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{LabelSet, LabeledUtterance};
use crate::retriever::{ExemplarId, RetrievalHit};

pub const BUILTIN_TEMPLATE_VERSION: &str = "intent-classify-v1";

const BUILTIN_TEMPLATE: &str = "\
You are an expert assistant in the field of customer service.
Your task is to help workers in the customer service
department of a company. Your task is to classify the
customer's question in order to help the customer service
worker to answer the question.

In order to help the worker, you MUST respond
with the number and the name of one of the
following classes you know. If you cannot answer the question,
respond: \"-1 Unknown\".

In case you reply with something else, you will be penalized.

The classes are:
{{classes}}
{{examples}}
{{query}}
";

pub const EXAMPLES_HEADER: &str = "Here are some examples of questions and their classes:";
pub const DEFAULT_CHARS_PER_TOKEN: f64 = 4.0;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("label set is empty")]
    EmptyLabelSet,
    #[error("query is empty")]
    EmptyQuery,
    #[error("template is missing the {0} marker")]
    MissingMarker(&'static str),
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

/// Where the few-shot examples go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Listed inside the system message.
    #[default]
    SystemContext,
    /// Replayed as prior user/assistant turns.
    ChatHistory,
}

impl std::str::FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "system" | "system_context" | "system-context" => Ok(Placement::SystemContext),
            "chat" | "chat_history" | "chat-history" => Ok(Placement::ChatHistory),
            other => Err(format!("unknown placement {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub messages: Vec<ChatMessage>,
    pub estimated_tokens: u64,
    pub placement: Placement,
    pub exemplar_ids_used: Vec<ExemplarId>,
}

impl PromptBundle {
    pub fn system_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }

    /// Content of the last user message (the query turn).
    pub fn final_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    pub fn total_chars(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenEstimator {
    /// Counts come from the provider after the call; no pre-flight estimate.
    ProviderReported,
    CharsPerToken(f64),
}

impl Default for TokenEstimator {
    fn default() -> Self {
        TokenEstimator::CharsPerToken(DEFAULT_CHARS_PER_TOKEN)
    }
}

impl TokenEstimator {
    pub fn estimate_chars(&self, chars: usize) -> Option<u64> {
        match *self {
            TokenEstimator::ProviderReported => None,
            TokenEstimator::CharsPerToken(ratio) => Some((chars as f64 / ratio).ceil() as u64),
        }
    }

    pub fn estimate_text(&self, text: &str) -> Option<u64> {
        self.estimate_chars(text.chars().count())
    }
}

/// `ceil(total content characters / ratio)`; `None` for provider-reported mode.
pub fn estimate_tokens(bundle: &PromptBundle, estimator: &TokenEstimator) -> Option<u64> {
    estimator.estimate_chars(bundle.total_chars())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    system: String,
    user: String,
    source: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptTemplate {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TEMPLATE).expect("built-in template is valid")
    }

    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let marker_line = source
            .split_inclusive('\n')
            .scan(0usize, |offset, line| {
                let start = *offset;
                *offset += line.len();
                Some((start, line))
            })
            .find(|(_, line)| line.contains("{{query}}"))
            .map(|(start, _)| start)
            .ok_or(PromptError::MissingMarker("{{query}}"))?;
        let (system, user) = source.split_at(marker_line);
        if !system.contains("{{classes}}") {
            return Err(PromptError::MissingMarker("{{classes}}"));
        }
        Ok(PromptTemplate {
            system: system.to_string(),
            user: user.to_string(),
            source: source.to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Hex SHA-256 of the template source.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.source.as_bytes()))
    }
}

fn one_line(text: &str) -> String {
    text.replace(['\r', '\n'], " ")
}

fn class_listing(labels: &LabelSet) -> String {
    labels
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| format!("{i} {name}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders one classification request. `exemplars` are emitted in the given
/// order.
pub fn render_classification_prompt(
    template: &PromptTemplate,
    label_set: &LabelSet,
    exemplars: &[(ExemplarId, &LabeledUtterance)],
    query: &str,
    placement: Placement,
) -> Result<PromptBundle, PromptError> {
    if label_set.is_empty() {
        return Err(PromptError::EmptyLabelSet);
    }
    if query.trim().is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let examples_block = if placement == Placement::SystemContext && !exemplars.is_empty() {
        let lines: Vec<String> = exemplars
            .iter()
            .map(|(_, e)| format!("{} {}", one_line(&e.text), label_set.name(e.label)))
            .collect();
        format!("\n{EXAMPLES_HEADER}\n{}", lines.join("\n"))
    } else {
        String::new()
    };
    let system = template
        .system
        .replace("{{classes}}", &class_listing(label_set))
        .replace("{{examples}}", &examples_block)
        .trim_end()
        .to_string();
    let user = template.user.replace("{{query}}", query).trim().to_string();

    let mut messages = vec![ChatMessage::new(Role::System, system)];
    if placement == Placement::ChatHistory {
        for (_, e) in exemplars {
            messages.push(ChatMessage::new(Role::User, one_line(&e.text)));
            messages.push(ChatMessage::new(
                Role::Assistant,
                format!("{} {}", e.label, label_set.name(e.label)),
            ));
        }
    }
    messages.push(ChatMessage::new(Role::User, user));

    let mut bundle = PromptBundle {
        messages,
        estimated_tokens: 0,
        placement,
        exemplar_ids_used: exemplars.iter().map(|(id, _)| *id).collect(),
    };
    bundle.estimated_tokens = estimate_tokens(&bundle, &TokenEstimator::default()).unwrap_or(0);
    Ok(bundle)
}

/// The `(text, label)` example pairs a rendered bundle carries, recovered
/// from whichever placement it uses.
pub fn encoded_examples(bundle: &PromptBundle) -> Vec<(String, String)> {
    match bundle.placement {
        Placement::SystemContext => {
            let Some(system) = bundle.system_text() else {
                return Vec::new();
            };
            let Some((_, block)) = system.split_once(&format!("{EXAMPLES_HEADER}\n")) else {
                return Vec::new();
            };
            block
                .lines()
                .filter_map(|line| line.rsplit_once(' '))
                .map(|(text, label)| (text.to_string(), label.to_string()))
                .collect()
        }
        Placement::ChatHistory => bundle.messages[1..bundle.messages.len().saturating_sub(1)]
            .chunks_exact(2)
            .filter_map(|pair| {
                let (_, name) = pair[1].content.split_once(' ')?;
                Some((pair[0].content.clone(), name.to_string()))
            })
            .collect(),
    }
}

/// Order in which retrieved examples are written into a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleOrder {
    /// Least similar first, so the best match sits next to the query.
    #[default]
    AscendingSimilarity,
    DescendingSimilarity,
}

/// Exemplar ids from top-K hits, arranged for rendering.
pub fn order_hits(hits: &[RetrievalHit], order: ExampleOrder) -> Vec<ExemplarId> {
    let ids = hits.iter().map(|h| h.exemplar_id);
    match order {
        ExampleOrder::DescendingSimilarity => ids.collect(),
        ExampleOrder::AscendingSimilarity => ids.rev().collect(),
    }
}
