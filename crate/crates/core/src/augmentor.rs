//! LLM-driven data augmentation over groups of easily confused labels.
//!
//! Labels are grouped by centroid similarity (or by a hand-written override
//! file), each group gets one generation prompt carrying three seed examples
//! per member class, and the generator's `<label>\t<text>` lines are
//! filtered before they join any exemplar set.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_records, CorpusError, ExemplarSet, LabelSet, LabeledUtterance, Origin, Record};
use crate::embedder::EmbeddingVector;
use crate::labelspace::canonicalize;
use crate::promptkit::{estimate_tokens, ChatMessage, Placement, PromptBundle, Role, TokenEstimator};
use crate::retriever::{fit_centroids, RetrieveError};

pub const DEFAULT_GROUPS: usize = 10;
pub const DEFAULT_GENERATE_PER_CLASS: usize = 20;
pub const SEEDS_PER_CLASS: usize = 3;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid label partition: {0}")]
    InvalidPartition(String),
    #[error("class {0} has no exemplars")]
    EmptyClass(String),
    #[error("group count {g} outside 1..={classes}")]
    GroupCount { g: usize, classes: usize },
    #[error("class {label} has {have} seed exemplars, need {need}")]
    SeedShortage { label: String, have: usize, need: usize },
    #[error(transparent)]
    Retrieve(RetrieveError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl From<RetrieveError> for AugmentError {
    fn from(e: RetrieveError) -> Self {
        match e {
            RetrieveError::EmptyClass(label) => AugmentError::EmptyClass(label),
            other => AugmentError::Retrieve(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGroup {
    pub group_id: usize,
    pub member_labels: Vec<usize>,
}

/// Partitions the label set into `g` groups of similar classes.
///
/// Starting from one group per class, the two groups whose centroids have
/// the highest cosine similarity are merged until `g` remain; a group's
/// centroid is the normalized mean of its members' class centroids. Ties
/// merge the lowest-indexed pair. Groups are numbered by their smallest
/// member. With `override_path` the partition is read from that file
/// instead and `g` is not consulted.
pub fn build_groups(
    exemplars: &ExemplarSet,
    vectors: &[EmbeddingVector],
    g: usize,
    override_path: Option<&Path>,
) -> Result<Vec<LabelGroup>, AugmentError> {
    let labels = exemplars.label_set();
    if let Some(path) = override_path {
        return load_group_override(path, labels);
    }
    if g == 0 || g > labels.len() {
        return Err(AugmentError::GroupCount { g, classes: labels.len() });
    }
    let model = fit_centroids(exemplars, vectors)?;
    let class_centroids: Vec<Vec<f64>> = model
        .centroids()
        .iter()
        .map(|c| c.as_slice().iter().map(|&v| f64::from(v)).collect())
        .collect();

    let mut groups: Vec<(Vec<usize>, Vec<f64>)> = class_centroids
        .iter()
        .enumerate()
        .map(|(c, centroid)| (vec![c], centroid.clone()))
        .collect();
    while groups.len() > g {
        let mut best = (0, 1, f64::NEG_INFINITY);
        for i in 0..groups.len() {
            for j in i + 1..groups.len() {
                let s: f64 = groups[i].1.iter().zip(&groups[j].1).map(|(a, b)| a * b).sum();
                if s > best.2 {
                    best = (i, j, s);
                }
            }
        }
        let (i, j, _) = best;
        let (members, _) = groups.remove(j);
        groups[i].0.extend(members);
        groups[i].0.sort_unstable();
        groups[i].1 = group_centroid(&groups[i].0, &class_centroids);
    }
    Ok(number_groups(groups.into_iter().map(|(m, _)| m).collect()))
}

fn group_centroid(members: &[usize], class_centroids: &[Vec<f64>]) -> Vec<f64> {
    let dim = class_centroids[0].len();
    let mut mean = vec![0.0; dim];
    for &m in members {
        for (acc, v) in mean.iter_mut().zip(&class_centroids[m]) {
            *acc += v;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        mean.iter_mut().for_each(|v| *v /= norm);
    }
    mean
}

fn number_groups(mut member_lists: Vec<Vec<usize>>) -> Vec<LabelGroup> {
    for m in &mut member_lists {
        m.sort_unstable();
    }
    member_lists.sort_by_key(|m| m[0]);
    member_lists
        .into_iter()
        .enumerate()
        .map(|(group_id, member_labels)| LabelGroup { group_id, member_labels })
        .collect()
}

/// Reads a JSON array of arrays of label names and checks it partitions
/// `labels`.
pub fn load_group_override(path: &Path, labels: &LabelSet) -> Result<Vec<LabelGroup>, AugmentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AugmentError::InvalidPartition(format!("{}: {e}", path.display())))?;
    let raw: Vec<Vec<String>> =
        serde_json::from_str(&text).map_err(|e| AugmentError::InvalidPartition(e.to_string()))?;
    partition_from_names(&raw, labels)
}

pub fn partition_from_names(raw: &[Vec<String>], labels: &LabelSet) -> Result<Vec<LabelGroup>, AugmentError> {
    let mut seen = vec![false; labels.len()];
    let mut lists = Vec::with_capacity(raw.len());
    for group in raw {
        if group.is_empty() {
            return Err(AugmentError::InvalidPartition("empty group".into()));
        }
        let mut members = Vec::with_capacity(group.len());
        for name in group {
            let index = labels
                .resolve(name)
                .ok_or_else(|| AugmentError::InvalidPartition(format!("unknown label {name:?}")))?;
            if std::mem::replace(&mut seen[index], true) {
                return Err(AugmentError::InvalidPartition(format!(
                    "label {} appears twice",
                    labels.name(index)
                )));
            }
            members.push(index);
        }
        lists.push(members);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(AugmentError::InvalidPartition(format!(
            "label {} is in no group",
            labels.name(missing)
        )));
    }
    Ok(number_groups(lists))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub group: LabelGroup,
    /// `SEEDS_PER_CLASS` per member class, grouped in member order.
    pub seed_exemplars: Vec<LabeledUtterance>,
    pub n_generate_per_class: usize,
}

impl GenerationRequest {
    /// Takes the first three exemplars of every member class as seeds.
    pub fn new(group: LabelGroup, exemplars: &ExemplarSet, n_generate_per_class: usize) -> Result<Self, AugmentError> {
        let mut seeds = Vec::with_capacity(group.member_labels.len() * SEEDS_PER_CLASS);
        for &label in &group.member_labels {
            let have: Vec<_> = exemplars.of_class(label).take(SEEDS_PER_CLASS).cloned().collect();
            if have.len() < SEEDS_PER_CLASS {
                return Err(AugmentError::SeedShortage {
                    label: exemplars.label_set().name(label).to_string(),
                    have: have.len(),
                    need: SEEDS_PER_CLASS,
                });
            }
            seeds.extend(have);
        }
        Ok(GenerationRequest {
            group,
            seed_exemplars: seeds,
            n_generate_per_class,
        })
    }

    pub fn expected_lines(&self) -> usize {
        self.n_generate_per_class * self.group.member_labels.len()
    }
}

const GENERATION_INSTRUCTIONS: &str = "\
You write training data for a customer service intent classifier.
The classes you will be given are easy to confuse with one another.
For each class, write new customer questions that clearly belong to that class and could not be mistaken for any other class in the list.
Vary the wording, length and tone. Do not copy the examples.

Reply with one question per line, in the form:
<class_name>\t<question>
Use the class names exactly as given. Do not number the lines or add any other text.";

pub fn render_generation_prompt(request: &GenerationRequest, labels: &LabelSet) -> PromptBundle {
    let mut user = String::from("Classes and examples:\n");
    for &label in &request.group.member_labels {
        let _ = write!(user, "\n{}\n", labels.name(label));
        for seed in request.seed_exemplars.iter().filter(|s| s.label == label) {
            let _ = writeln!(user, "- {}", seed.text.replace(['\r', '\n'], " "));
        }
    }
    let members = request.group.member_labels.len();
    let _ = write!(
        user,
        "\nWrite {} new questions for each of the {} {} above, {} lines in total.",
        request.n_generate_per_class,
        members,
        if members == 1 { "class" } else { "classes" },
        request.expected_lines()
    );
    let mut bundle = PromptBundle {
        messages: vec![
            ChatMessage::new(Role::System, GENERATION_INSTRUCTIONS),
            ChatMessage::new(Role::User, user),
        ],
        estimated_tokens: 0,
        placement: Placement::SystemContext,
        exemplar_ids_used: Vec::new(),
    };
    bundle.estimated_tokens = estimate_tokens(&bundle, &TokenEstimator::default()).unwrap_or(0);
    bundle
}

/// One unvalidated `<label>\t<text>` line from the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedCandidate {
    pub label: String,
    pub text: String,
    pub group_id: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Malformed,
    UnknownLabel,
    EmptyText,
    DuplicateOfExisting,
    DuplicateCandidate,
    OverClassLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: String,
    pub reason: RejectReason,
    pub group_id: Option<usize>,
}

/// Splits generator output into candidates and malformed lines.
pub fn parse_generation_output(raw: &str, group_id: Option<usize>) -> (Vec<GeneratedCandidate>, Vec<Rejection>) {
    let mut candidates = Vec::new();
    let mut rejections = Vec::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        match line.split_once('\t') {
            Some((label, text)) => candidates.push(GeneratedCandidate {
                label: label.trim().to_string(),
                text: text.trim().to_string(),
                group_id,
            }),
            None => rejections.push(Rejection {
                line: line.to_string(),
                reason: RejectReason::Malformed,
                group_id,
            }),
        }
    }
    (candidates, rejections)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedItem {
    pub utterance: LabeledUtterance,
    pub group_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    /// Survivors grouped by class, input order kept within a class.
    pub accepted: Vec<GeneratedItem>,
    pub rejections: Vec<Rejection>,
    pub per_class_counts: Vec<usize>,
}

impl FilterOutcome {
    pub fn exemplar_set(&self, labels: &LabelSet) -> ExemplarSet {
        ExemplarSet::from_items(labels.clone(), self.accepted.iter().map(|i| i.utterance.clone()).collect())
    }

    pub fn as_candidates(&self, labels: &LabelSet) -> Vec<GeneratedCandidate> {
        self.accepted
            .iter()
            .map(|i| GeneratedCandidate {
                label: labels.name(i.utterance.label).to_string(),
                text: i.utterance.text.clone(),
                group_id: i.group_id,
            })
            .collect()
    }
}

fn dedup_key(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Drops candidates with unresolvable labels, empty text, or text that
/// duplicates an existing exemplar or an earlier candidate (compared
/// case-insensitively with whitespace collapsed). With `max_per_class`, a
/// class stops accepting once it reaches the cap.
pub fn filter_generated(
    candidates: &[GeneratedCandidate],
    existing: &ExemplarSet,
    labels: &LabelSet,
    max_per_class: Option<usize>,
) -> FilterOutcome {
    let mut seen: HashSet<String> = existing.exemplars().iter().map(|e| dedup_key(&e.text)).collect();
    let mut counts = vec![0usize; labels.len()];
    let mut accepted = Vec::new();
    let mut rejections = Vec::new();
    for c in candidates {
        let reject = |reason| Rejection {
            line: format!("{}\t{}", c.label, c.text),
            reason,
            group_id: c.group_id,
        };
        let Some(label) = labels.index_of(&canonicalize(&c.label)) else {
            rejections.push(reject(RejectReason::UnknownLabel));
            continue;
        };
        if c.text.trim().is_empty() {
            rejections.push(reject(RejectReason::EmptyText));
            continue;
        }
        let key = dedup_key(&c.text);
        if existing.exemplars().iter().any(|e| dedup_key(&e.text) == key) {
            rejections.push(reject(RejectReason::DuplicateOfExisting));
            continue;
        }
        if seen.contains(&key) {
            rejections.push(reject(RejectReason::DuplicateCandidate));
            continue;
        }
        if max_per_class.is_some_and(|cap| counts[label] >= cap) {
            rejections.push(reject(RejectReason::OverClassLimit));
            continue;
        }
        seen.insert(key);
        counts[label] += 1;
        accepted.push(GeneratedItem {
            utterance: LabeledUtterance {
                text: c.text.trim().to_string(),
                label,
                origin: Origin::Generated,
            },
            group_id: c.group_id,
        });
    }
    accepted.sort_by_key(|i| i.utterance.label);
    FilterOutcome {
        accepted,
        rejections,
        per_class_counts: counts,
    }
}

/// Writes survivors as dataset JSONL with `origin` and `group_id`.
pub fn write_generated(path: &Path, labels: &LabelSet, items: &[GeneratedItem]) -> Result<(), AugmentError> {
    let records = items.iter().map(|i| Record {
        group_id: i.group_id,
        ..Record::from_utterance(&i.utterance, labels)
    });
    write_records(path, records)?;
    Ok(())
}
