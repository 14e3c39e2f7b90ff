//! Datasets, label sets, and N-shot exemplar selection.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelspace::canonicalize;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {record}: unknown label {label:?}")]
    UnknownLabel { record: usize, label: String },
    #[error("record {record}: empty text")]
    EmptyText { record: usize },
    #[error("record {record}: malformed record: {reason}")]
    MalformedRecord { record: usize, reason: String },
    #[error("duplicate label after canonicalization: {0:?}")]
    DuplicateLabel(String),
    #[error("label {0:?} canonicalizes to an empty name")]
    EmptyLabel(String),
    #[error("class {label} has {have} items, need {need}")]
    ClassShortage { label: String, have: usize, need: usize },
    #[error("curated file has no items for class {label}")]
    CuratedFileMissingClass { label: String },
    #[error("class {label} has {have} generated items, need {need}")]
    GeneratedShortage { label: String, have: usize, need: usize },
    #[error("exemplar sets use different label sets")]
    LabelSetMismatch,
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// The 77 Banking77 intents in their canonical, dataset-index order.
pub const BANKING77_LABELS: [&str; 77] = [
    "activate_my_card",
    "age_limit",
    "apple_pay_or_google_pay",
    "atm_support",
    "automatic_top_up",
    "balance_not_updated_after_bank_transfer",
    "balance_not_updated_after_cheque_or_cash_deposit",
    "beneficiary_not_allowed",
    "cancel_transfer",
    "card_about_to_expire",
    "card_acceptance",
    "card_arrival",
    "card_delivery_estimate",
    "card_linking",
    "card_not_working",
    "card_payment_fee_charged",
    "card_payment_not_recognised",
    "card_payment_wrong_exchange_rate",
    "card_swallowed",
    "cash_withdrawal_charge",
    "cash_withdrawal_not_recognised",
    "change_pin",
    "compromised_card",
    "contactless_not_working",
    "country_support",
    "declined_card_payment",
    "declined_cash_withdrawal",
    "declined_transfer",
    "direct_debit_payment_not_recognised",
    "disposable_card_limits",
    "edit_personal_details",
    "exchange_charge",
    "exchange_rate",
    "exchange_via_app",
    "extra_charge_on_statement",
    "failed_transfer",
    "fiat_currency_support",
    "get_disposable_virtual_card",
    "get_physical_card",
    "getting_spare_card",
    "getting_virtual_card",
    "lost_or_stolen_card",
    "lost_or_stolen_phone",
    "order_physical_card",
    "passcode_forgotten",
    "pending_card_payment",
    "pending_cash_withdrawal",
    "pending_top_up",
    "pending_transfer",
    "pin_blocked",
    "receiving_money",
    "refund_not_showing_up",
    "request_refund",
    "reverted_card_payment",
    "supported_cards_and_currencies",
    "terminate_account",
    "top_up_by_bank_transfer_charge",
    "top_up_by_card_charge",
    "top_up_by_cash_or_cheque",
    "top_up_failed",
    "top_up_limits",
    "top_up_reverted",
    "topping_up_by_card",
    "transaction_charged_twice",
    "transfer_fee_charged",
    "transfer_into_account",
    "transfer_not_received_by_recipient",
    "transfer_timing",
    "unable_to_verify_identity",
    "verify_my_identity",
    "verify_source_of_funds",
    "verify_top_up",
    "virtual_card_not_working",
    "visa_or_mastercard",
    "why_verify_identity",
    "wrong_amount_of_cash_received",
    "wrong_exchange_rate_for_cash_withdrawal",
];

pub fn banking77_label_set() -> LabelSet {
    LabelSet::new(BANKING77_LABELS).expect("built-in labels are unique")
}

/// Ordered, canonicalized label names with dense zero-based indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct LabelSet {
    names: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl LabelSet {
    pub fn new<I, S>(names: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = LabelSet {
            names: Vec::new(),
            lookup: HashMap::new(),
        };
        for raw in names {
            let name = canonicalize(raw.as_ref());
            if name.is_empty() {
                return Err(CorpusError::EmptyLabel(raw.as_ref().to_string()));
            }
            if out.lookup.insert(name.clone(), out.names.len()).is_some() {
                return Err(CorpusError::DuplicateLabel(name));
            }
            out.names.push(name);
        }
        Ok(out)
    }

    /// Reads one label per line; blank lines are skipped.
    pub fn load_lines(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::new(text.lines().filter(|l| !l.trim().is_empty()))
    }

    pub fn save_lines(&self, path: &Path) -> Result<(), CorpusError> {
        let mut body = self.names.join("\n");
        body.push('\n');
        std::fs::write(path, body).map_err(|e| CorpusError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Looks up an already-canonical name.
    pub fn index_of(&self, canonical_name: &str) -> Option<usize> {
        self.lookup.get(canonical_name).copied()
    }

    /// Canonicalizes `raw` before looking it up.
    pub fn resolve(&self, raw: &str) -> Option<usize> {
        self.index_of(&canonicalize(raw))
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.names
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = CorpusError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        LabelSet::new(names)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Original,
    Curated,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub text: String,
    pub label: usize,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub label_set: LabelSet,
    pub items: Vec<LabeledUtterance>,
    pub split: Split,
}

impl Dataset {
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_set.len()];
        for item in &self.items {
            counts[item.label] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Csv,
    Jsonl,
}

impl RecordFormat {
    /// Guesses from the file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => RecordFormat::Csv,
            _ => RecordFormat::Jsonl,
        }
    }
}

/// One serialized dataset row. Exemplar, curated, and generated files share
/// this layout; the optional columns are ignored where they do not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<usize>,
}

impl Record {
    pub fn from_utterance(item: &LabeledUtterance, labels: &LabelSet) -> Self {
        Record {
            text: item.text.clone(),
            label: labels.name(item.label).to_string(),
            origin: Some(item.origin),
            rank: None,
            group_id: None,
        }
    }
}

/// Reads raw records, numbering them from 1. For JSONL the number is the
/// line number; for CSV it is the data row number (header excluded).
pub fn read_records(path: &Path, format: RecordFormat) -> Result<Vec<(usize, Record)>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    match format {
        RecordFormat::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| CorpusError::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: Record = serde_json::from_str(&line).map_err(|e| {
                    CorpusError::MalformedRecord {
                        record: i + 1,
                        reason: e.to_string(),
                    }
                })?;
                out.push((i + 1, record));
            }
        }
        RecordFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
            for (i, row) in reader.deserialize::<Record>().enumerate() {
                let record = row.map_err(|e| CorpusError::MalformedRecord {
                    record: i + 1,
                    reason: e.to_string(),
                })?;
                out.push((i + 1, record));
            }
        }
    }
    Ok(out)
}

/// Loads a dataset. With `declared` labels every record must resolve against
/// them; otherwise the label set is inferred as the sorted unique canonical
/// names found in the file.
pub fn load_dataset(
    path: &Path,
    format: RecordFormat,
    declared: Option<&LabelSet>,
    split: Split,
) -> Result<Dataset, CorpusError> {
    let records = read_records(path, format)?;
    let label_set = match declared {
        Some(labels) => labels.clone(),
        None => {
            let mut names: Vec<String> = records.iter().map(|(_, r)| canonicalize(&r.label)).collect();
            names.sort();
            names.dedup();
            if let Some((record, r)) = records.iter().find(|(_, r)| canonicalize(&r.label).is_empty()) {
                return Err(CorpusError::UnknownLabel {
                    record: *record,
                    label: r.label.clone(),
                });
            }
            LabelSet::new(names)?
        }
    };
    let items = records
        .into_iter()
        .map(|(record, r)| utterance_from_record(record, r, &label_set, Origin::Original))
        .collect::<Result<_, _>>()?;
    Ok(Dataset {
        label_set,
        items,
        split,
    })
}

fn utterance_from_record(
    record: usize,
    r: Record,
    labels: &LabelSet,
    default_origin: Origin,
) -> Result<LabeledUtterance, CorpusError> {
    if r.text.trim().is_empty() {
        return Err(CorpusError::EmptyText { record });
    }
    let label = labels.resolve(&r.label).ok_or_else(|| CorpusError::UnknownLabel {
        record,
        label: r.label.clone(),
    })?;
    Ok(LabeledUtterance {
        text: r.text,
        label,
        origin: r.origin.unwrap_or(default_origin),
    })
}

/// Writes utterances as JSONL records with canonical label names.
pub fn write_jsonl<'a, I>(path: &Path, labels: &LabelSet, items: I) -> Result<(), CorpusError>
where
    I: IntoIterator<Item = &'a LabeledUtterance>,
{
    let records = items.into_iter().map(|item| Record::from_utterance(item, labels));
    write_records(path, records)
}

pub fn write_records<I>(path: &Path, records: I) -> Result<(), CorpusError>
where
    I: IntoIterator<Item = Record>,
{
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(writer, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    writer.flush().map_err(|e| CorpusError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SamplingStrategy {
    RandomSeeded { seed: u64 },
    CuratedFile { path: PathBuf },
    Mixed { original_per_class: usize, generated_per_class: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub n_per_class: usize,
    pub strategy: SamplingStrategy,
}

impl SamplingPlan {
    pub fn random(n_per_class: usize, seed: u64) -> Self {
        SamplingPlan {
            n_per_class,
            strategy: SamplingStrategy::RandomSeeded { seed },
        }
    }

    pub fn curated(n_per_class: usize, path: impl Into<PathBuf>) -> Self {
        SamplingPlan {
            n_per_class,
            strategy: SamplingStrategy::CuratedFile { path: path.into() },
        }
    }

    pub fn mixed(original_per_class: usize, generated_per_class: usize) -> Self {
        SamplingPlan {
            n_per_class: original_per_class + generated_per_class,
            strategy: SamplingStrategy::Mixed {
                original_per_class,
                generated_per_class,
            },
        }
    }
}

/// In-context examples grouped by class in label-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    label_set: LabelSet,
    exemplars: Vec<LabeledUtterance>,
}

impl ExemplarSet {
    pub fn empty(label_set: LabelSet) -> Self {
        ExemplarSet {
            label_set,
            exemplars: Vec::new(),
        }
    }

    /// Groups `items` by class; within a class the input order is kept.
    pub fn from_items(label_set: LabelSet, mut items: Vec<LabeledUtterance>) -> Self {
        items.sort_by_key(|item| item.label);
        ExemplarSet {
            label_set,
            exemplars: items,
        }
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn exemplars(&self) -> &[LabeledUtterance] {
        &self.exemplars
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_set.len()];
        for item in &self.exemplars {
            counts[item.label] += 1;
        }
        counts
    }

    pub fn of_class(&self, label: usize) -> impl Iterator<Item = &LabeledUtterance> {
        self.exemplars.iter().filter(move |item| item.label == label)
    }

    pub fn load(path: &Path, labels: &LabelSet) -> Result<Self, CorpusError> {
        let dataset = load_dataset(path, RecordFormat::from_path(path), Some(labels), Split::Train)?;
        Ok(Self::from_items(dataset.label_set, dataset.items))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        write_jsonl(path, &self.label_set, &self.exemplars)
    }
}

/// Draws `n_per_class` exemplars per class according to `plan`.
///
/// Random draws shuffle each class's items (in dataset order) with a ChaCha8
/// stream selected by the class index, so one class's draw never depends on
/// another class's size. Curated files are ordered by `rank` (stable) and the
/// best `n_per_class` per class are kept.
pub fn sample_few_shot(dataset: &Dataset, plan: &SamplingPlan) -> Result<ExemplarSet, CorpusError> {
    let labels = &dataset.label_set;
    let n = plan.n_per_class;
    if n == 0 {
        return Ok(ExemplarSet::empty(labels.clone()));
    }
    match &plan.strategy {
        SamplingStrategy::RandomSeeded { seed } => {
            let mut by_class: Vec<Vec<&LabeledUtterance>> = vec![Vec::new(); labels.len()];
            for item in &dataset.items {
                by_class[item.label].push(item);
            }
            let mut out = Vec::with_capacity(n * labels.len());
            for (class, mut pool) in by_class.into_iter().enumerate() {
                if pool.len() < n {
                    return Err(CorpusError::ClassShortage {
                        label: labels.name(class).to_string(),
                        have: pool.len(),
                        need: n,
                    });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(class as u64);
                let (chosen, _) = pool.partial_shuffle(&mut rng, n);
                out.extend(chosen.iter().map(|item| (*item).clone()));
            }
            Ok(ExemplarSet {
                label_set: labels.clone(),
                exemplars: out,
            })
        }
        SamplingStrategy::CuratedFile { path } => {
            let records = read_records(path, RecordFormat::from_path(path))?;
            let mut by_class: Vec<Vec<(u32, LabeledUtterance)>> = vec![Vec::new(); labels.len()];
            for (record, r) in records {
                let rank = r.rank.unwrap_or(u32::MAX);
                let item = utterance_from_record(record, r, labels, Origin::Curated)?;
                by_class[item.label].push((rank, item));
            }
            let mut out = Vec::with_capacity(n * labels.len());
            for (class, mut pool) in by_class.into_iter().enumerate() {
                if pool.is_empty() {
                    return Err(CorpusError::CuratedFileMissingClass {
                        label: labels.name(class).to_string(),
                    });
                }
                if pool.len() < n {
                    return Err(CorpusError::ClassShortage {
                        label: labels.name(class).to_string(),
                        have: pool.len(),
                        need: n,
                    });
                }
                pool.sort_by_key(|(rank, _)| *rank);
                out.extend(pool.into_iter().take(n).map(|(_, item)| item));
            }
            Ok(ExemplarSet {
                label_set: labels.clone(),
                exemplars: out,
            })
        }
        SamplingStrategy::Mixed { .. } => Err(CorpusError::InvalidPlan(
            "mixed plans combine two exemplar sets; use mix_augmented".into(),
        )),
    }
}

/// Per class: the first `original_per_class` originals followed by the first
/// `generated_per_class` generated items.
pub fn mix_augmented(
    original: &ExemplarSet,
    generated: &ExemplarSet,
    plan: &SamplingPlan,
) -> Result<ExemplarSet, CorpusError> {
    let SamplingStrategy::Mixed {
        original_per_class,
        generated_per_class,
    } = plan.strategy
    else {
        return Err(CorpusError::InvalidPlan("mix_augmented needs a mixed plan".into()));
    };
    if original_per_class + generated_per_class != plan.n_per_class {
        return Err(CorpusError::InvalidPlan(format!(
            "{original_per_class} + {generated_per_class} != {}",
            plan.n_per_class
        )));
    }
    if original.label_set != generated.label_set {
        return Err(CorpusError::LabelSetMismatch);
    }
    let labels = &original.label_set;
    let mut out = Vec::with_capacity(plan.n_per_class * labels.len());
    for class in 0..labels.len() {
        let originals: Vec<_> = original.of_class(class).take(original_per_class).collect();
        if originals.len() < original_per_class {
            return Err(CorpusError::ClassShortage {
                label: labels.name(class).to_string(),
                have: originals.len(),
                need: original_per_class,
            });
        }
        let extra: Vec<_> = generated.of_class(class).take(generated_per_class).collect();
        if extra.len() < generated_per_class {
            return Err(CorpusError::GeneratedShortage {
                label: labels.name(class).to_string(),
                have: generated.of_class(class).count(),
                need: generated_per_class,
            });
        }
        out.extend(originals.into_iter().cloned());
        out.extend(extra.into_iter().cloned());
    }
    Ok(ExemplarSet {
        label_set: labels.clone(),
        exemplars: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(classes: usize, per_class: usize) -> Dataset {
        let label_set = LabelSet::new((0..classes).map(|c| format!("class_{c}"))).unwrap();
        let items = (0..per_class)
            .flat_map(|i| {
                (0..classes).map(move |c| LabeledUtterance {
                    text: format!("utterance {i} of class {c}"),
                    label: c,
                    origin: Origin::Original,
                })
            })
            .collect();
        Dataset {
            label_set,
            items,
            split: Split::Train,
        }
    }

    #[test]
    fn banking77_has_77_unique_labels() {
        let labels = banking77_label_set();
        assert_eq!(labels.len(), 77);
        assert_eq!(labels.name(0), "activate_my_card");
        assert_eq!(labels.name(76), "wrong_exchange_rate_for_cash_withdrawal");
    }

    #[test]
    fn duplicate_labels_rejected_after_canonicalization() {
        let err = LabelSet::new(["Card Swallowed", "card_swallowed"]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateLabel(_)));
    }

    #[test]
    fn label_resolves_through_canonicalization() {
        let labels = banking77_label_set();
        let direct = labels.index_of("card_swallowed").unwrap();
        assert_eq!(labels.resolve("Card Swallowed"), Some(direct));
        assert_eq!(canonicalize("Card Swallowed"), canonicalize("card_swallowed"));
    }

    #[test]
    fn load_csv_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "text,label\n\"My card, it was declined.\",Card Swallowed\nhello,age_limit\n").unwrap();
        let labels = banking77_label_set();
        let ds = load_dataset(&path, RecordFormat::Csv, Some(&labels), Split::Train).unwrap();
        assert_eq!(ds.items.len(), 2);
        assert_eq!(ds.items[0].text, "My card, it was declined.");
        assert_eq!(ds.items[0].label, 18);

        std::fs::write(&path, "text,label\nok,age_limit\n  ,age_limit\n").unwrap();
        let err = load_dataset(&path, RecordFormat::Csv, Some(&labels), Split::Train).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyText { record: 2 }));

        std::fs::write(&path, "text,label\nok,not_a_label\n").unwrap();
        let err = load_dataset(&path, RecordFormat::Csv, Some(&labels), Split::Train).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownLabel { record: 1, .. }));
    }

    #[test]
    fn load_jsonl_malformed_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"text":"a","label":"age_limit"}}"#).unwrap();
        writeln!(f, r#"{{"text":"b"}}"#).unwrap();
        drop(f);
        let labels = banking77_label_set();
        let err = load_dataset(&path, RecordFormat::Jsonl, Some(&labels), Split::Test).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRecord { record: 2, .. }));

        std::fs::write(&path, "").unwrap();
        let ds = load_dataset(&path, RecordFormat::Jsonl, Some(&labels), Split::Test).unwrap();
        assert!(ds.items.is_empty());
        assert_eq!(ds.label_set.len(), 77);
    }

    #[test]
    fn inferred_label_set_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            "{\"text\":\"a\",\"label\":\"Zeta\"}\n{\"text\":\"b\",\"label\":\"alpha\"}\n{\"text\":\"c\",\"label\":\"zeta\"}\n",
        )
        .unwrap();
        let ds = load_dataset(&path, RecordFormat::Jsonl, None, Split::Train).unwrap();
        assert_eq!(ds.label_set.names(), ["alpha", "zeta"]);
        assert_eq!(ds.class_counts(), vec![1, 2]);
    }

    #[test]
    fn zero_shot_plan_is_empty() {
        let ds = synthetic(4, 3);
        let set = sample_few_shot(&ds, &SamplingPlan::random(0, 1)).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn full_draw_takes_every_item() {
        let ds = synthetic(10, 5);
        let set = sample_few_shot(&ds, &SamplingPlan::random(5, 3)).unwrap();
        assert_eq!(set.len(), 50);
        // brute-force per-class scan
        for class in 0..10 {
            let n = set.exemplars().iter().filter(|e| e.label == class).count();
            assert_eq!(n, 5);
        }
    }

    #[test]
    fn shortage_is_an_error() {
        let ds = synthetic(3, 2);
        let err = sample_few_shot(&ds, &SamplingPlan::random(3, 0)).unwrap_err();
        assert!(matches!(err, CorpusError::ClassShortage { have: 2, need: 3, .. }));
    }

    #[test]
    fn random_draw_is_deterministic_and_seed_sensitive() {
        let ds = synthetic(5, 30);
        let a = sample_few_shot(&ds, &SamplingPlan::random(3, 7)).unwrap();
        let b = sample_few_shot(&ds, &SamplingPlan::random(3, 7)).unwrap();
        let c = sample_few_shot(&ds, &SamplingPlan::random(3, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn curated_file_orders_by_rank() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curated.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"text\":\"second\",\"label\":\"a\",\"rank\":2}\n",
                "{\"text\":\"first\",\"label\":\"a\",\"rank\":1}\n",
                "{\"text\":\"third\",\"label\":\"a\",\"rank\":3}\n",
                "{\"text\":\"b1\",\"label\":\"b\",\"rank\":1}\n",
                "{\"text\":\"b2\",\"label\":\"b\",\"rank\":2}\n",
            ),
        )
        .unwrap();
        let ds = Dataset {
            label_set: LabelSet::new(["a", "b"]).unwrap(),
            items: vec![],
            split: Split::Train,
        };
        let set = sample_few_shot(&ds, &SamplingPlan::curated(2, &path)).unwrap();
        let texts: Vec<_> = set.exemplars().iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts, ["first", "second", "b1", "b2"]);
        assert!(set.exemplars().iter().all(|e| e.origin == Origin::Curated));

        let ds3 = Dataset {
            label_set: LabelSet::new(["a", "b", "c"]).unwrap(),
            ..ds
        };
        let err = sample_few_shot(&ds3, &SamplingPlan::curated(2, &path)).unwrap_err();
        assert!(matches!(err, CorpusError::CuratedFileMissingClass { .. }));
    }

    fn tagged(set: &ExemplarSet, origin: Origin) -> ExemplarSet {
        let items = set
            .exemplars()
            .iter()
            .map(|e| LabeledUtterance {
                text: format!("{} [{origin:?}]", e.text),
                origin,
                ..e.clone()
            })
            .collect();
        ExemplarSet::from_items(set.label_set().clone(), items)
    }

    #[test]
    fn mixing_orders_originals_first() {
        let ds = synthetic(4, 20);
        let originals = sample_few_shot(&ds, &SamplingPlan::random(3, 1)).unwrap();
        let generated = tagged(&sample_few_shot(&ds, &SamplingPlan::random(17, 2)).unwrap(), Origin::Generated);
        for (o, g) in [(3, 2), (3, 7), (3, 12), (3, 17)] {
            let mixed = mix_augmented(&originals, &generated, &SamplingPlan::mixed(o, g)).unwrap();
            assert_eq!(mixed.len(), (o + g) * 4);
            for class in 0..4 {
                let origins: Vec<_> = mixed.of_class(class).map(|e| e.origin).collect();
                assert!(origins[..o].iter().all(|x| *x == Origin::Original));
                assert!(origins[o..].iter().all(|x| *x == Origin::Generated));
            }
        }
        let same = mix_augmented(&originals, &generated, &SamplingPlan::mixed(3, 0)).unwrap();
        assert_eq!(same, originals);

        let err = mix_augmented(&originals, &generated, &SamplingPlan::mixed(3, 18)).unwrap_err();
        assert!(matches!(err, CorpusError::GeneratedShortage { have: 17, need: 18, .. }));
    }
}
