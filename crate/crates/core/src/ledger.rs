//! Token usage journal and exact-decimal cost accounting.
//!
//! Money never passes through binary floating point: prices are parsed from
//! their decimal text and every product and sum is a [`Decimal`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("model {0:?} has no price")]
    UnpricedModel(String),
    #[error("run {0:?} is not in the ledger")]
    UnknownRun(String),
    #[error("invalid pricing file {path}: {reason}")]
    InvalidPricing { path: PathBuf, reason: String },
    #[error("malformed ledger line {line} in {path}: {reason}")]
    MalformedLine { path: PathBuf, line: usize, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LedgerError + '_ {
    move |source| LedgerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub run_id: String,
    pub call_index: usize,
    pub model_id: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Counts came from the character estimator, not the provider.
    pub estimated: bool,
    /// Requests sent for this call, retries included.
    #[serde(default = "one")]
    pub attempts: u32,
    /// False when the call ultimately failed.
    #[serde(default = "yes")]
    pub delivered: bool,
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPrice {
    #[serde(deserialize_with = "decimal_from_text_or_number")]
    pub input_per_1k: Decimal,
    #[serde(deserialize_with = "decimal_from_text_or_number")]
    pub output_per_1k: Decimal,
}

/// Accepts `"0.03"` or `0.03`. Numbers go through their shortest decimal
/// rendering, so `0.03` becomes exactly 3/100.
fn decimal_from_text_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<Decimal, D::Error> {
    struct Visitor;
    impl serde::de::Visitor<'_> for Visitor {
        type Value = Decimal;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a decimal price")
        }

        fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<Decimal, E> {
            Decimal::from_str(v.trim()).map_err(E::custom)
        }

        fn visit_f64<E: serde::de::Error>(self, v: f64) -> Result<Decimal, E> {
            Decimal::from_str(&v.to_string()).map_err(E::custom)
        }

        fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<Decimal, E> {
            Ok(Decimal::from(v))
        }

        fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<Decimal, E> {
            Ok(Decimal::from(v))
        }
    }
    d.deserialize_any(Visitor)
}

/// Dated per-1K-token prices, keyed by model id.
///
/// ```toml
/// effective_date = "2023-09-01"
/// [models.gpt-4]
/// input_per_1k = "0.03"
/// output_per_1k = "0.06"
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricingTable {
    pub effective_date: String,
    #[serde(default)]
    pub models: BTreeMap<String, ModelPrice>,
}

impl PricingTable {
    pub fn new(effective_date: impl Into<String>) -> Self {
        PricingTable {
            effective_date: effective_date.into(),
            models: BTreeMap::new(),
        }
    }

    pub fn with_model(mut self, model_id: &str, input_per_1k: Decimal, output_per_1k: Decimal) -> Self {
        self.models.insert(
            model_id.to_string(),
            ModelPrice {
                input_per_1k,
                output_per_1k,
            },
        );
        self
    }

    /// Parses TOML, or JSON when the path ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, LedgerError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let invalid = |reason: String| LedgerError::InvalidPricing {
            path: path.to_path_buf(),
            reason,
        };
        let table: PricingTable = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| invalid(e.to_string()))?
        };
        if let Some((id, _)) = table
            .models
            .iter()
            .find(|(_, p)| p.input_per_1k.is_sign_negative() || p.output_per_1k.is_sign_negative())
        {
            return Err(invalid(format!("negative price for {id}")));
        }
        Ok(table)
    }

    pub fn price(&self, model_id: &str) -> Result<&ModelPrice, LedgerError> {
        self.models
            .get(model_id)
            .ok_or_else(|| LedgerError::UnpricedModel(model_id.to_string()))
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String, LedgerError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn price_tokens(prompt_tokens: u64, completion_tokens: u64, price: &ModelPrice) -> Decimal {
    let thousand = Decimal::from(1000u32);
    Decimal::from(prompt_tokens) * price.input_per_1k / thousand
        + Decimal::from(completion_tokens) * price.output_per_1k / thousand
}

pub fn price_call(usage: &UsageRecord, pricing: &PricingTable) -> Result<Decimal, LedgerError> {
    let price = pricing.price(&usage.model_id)?;
    Ok(price_tokens(usage.prompt_tokens, usage.completion_tokens, price))
}

/// Usage records grouped by run, optionally mirrored to a JSONL journal.
#[derive(Debug, Default)]
pub struct Ledger {
    runs: BTreeMap<String, Vec<UsageRecord>>,
    journal: Option<(PathBuf, BufWriter<File>)>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends every new record to `path` as one JSON line.
    pub fn journaled(path: &Path) -> Result<Self, LedgerError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Ledger {
            runs: BTreeMap::new(),
            journal: Some((path.to_path_buf(), BufWriter::new(file))),
        })
    }

    /// Registers a run so that it reports even with no calls.
    pub fn begin_run(&mut self, run_id: &str) {
        self.runs.entry(run_id.to_string()).or_default();
    }

    pub fn append(&mut self, record: UsageRecord) -> Result<(), LedgerError> {
        if let Some((path, writer)) = &mut self.journal {
            let line = serde_json::to_string(&record).expect("usage record serializes");
            writeln!(writer, "{line}").map_err(io_err(path))?;
        }
        self.runs.entry(record.run_id.clone()).or_default().push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), LedgerError> {
        if let Some((path, writer)) = &mut self.journal {
            writer.flush().map_err(io_err(path))?;
        }
        Ok(())
    }

    pub fn run(&self, run_id: &str) -> Option<&[UsageRecord]> {
        self.runs.get(run_id).map(Vec::as_slice)
    }

    pub fn run_ids(&self) -> impl Iterator<Item = &str> {
        self.runs.keys().map(String::as_str)
    }

    /// Reads a JSONL journal, registering `run_id` even if the file is empty.
    pub fn load_journal(&mut self, path: &Path, run_id: &str) -> Result<(), LedgerError> {
        self.begin_run(run_id);
        let file = File::open(path).map_err(io_err(path))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: UsageRecord = serde_json::from_str(&line).map_err(|e| LedgerError::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            self.runs.entry(record.run_id.clone()).or_default().push(record);
        }
        Ok(())
    }
}

impl Drop for Ledger {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// A run to include in a cost report, with its display setting and an
/// optional quality metric to pair with the cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRun {
    pub run_id: String,
    pub setting: String,
    pub micro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub model_id: String,
    pub setting: String,
    /// Calls that returned a completion.
    pub calls: usize,
    /// Requests sent, retries and failures included.
    pub attempts: u64,
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
    pub total_cost_usd: Decimal,
    /// Some usage in this row came from the estimator.
    pub estimated: bool,
    pub micro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub effective_date: String,
    pub rows: Vec<CostRow>,
}

/// One row per (model, setting); rows keep first-seen order.
pub fn build_report(ledger: &Ledger, runs: &[ReportRun], pricing: &PricingTable) -> Result<CostReport, LedgerError> {
    let mut rows: Vec<CostRow> = Vec::new();
    let mut metrics: Vec<Vec<Option<f64>>> = Vec::new();
    for spec in runs {
        let records = ledger
            .run(&spec.run_id)
            .ok_or_else(|| LedgerError::UnknownRun(spec.run_id.clone()))?;
        let mut per_model: Vec<(&str, Vec<&UsageRecord>)> = Vec::new();
        for r in records {
            match per_model.iter_mut().find(|(m, _)| *m == r.model_id) {
                Some((_, v)) => v.push(r),
                None => per_model.push((&r.model_id, vec![r])),
            }
        }
        for (model_id, records) in per_model {
            let position = rows
                .iter()
                .position(|row| row.model_id == model_id && row.setting == spec.setting)
                .unwrap_or_else(|| {
                    rows.push(CostRow {
                        model_id: model_id.to_string(),
                        setting: spec.setting.clone(),
                        calls: 0,
                        attempts: 0,
                        total_prompt_tokens: 0,
                        total_completion_tokens: 0,
                        total_cost_usd: Decimal::ZERO,
                        estimated: false,
                        micro_f1: None,
                    });
                    metrics.push(Vec::new());
                    rows.len() - 1
                });
            let row = &mut rows[position];
            for r in records {
                row.attempts += u64::from(r.attempts);
                row.estimated |= r.estimated;
                if !r.delivered {
                    continue;
                }
                row.calls += 1;
                row.total_prompt_tokens += r.prompt_tokens;
                row.total_completion_tokens += r.completion_tokens;
                row.total_cost_usd += price_call(r, pricing)?;
            }
            metrics[position].push(spec.micro_f1);
        }
    }
    for (row, m) in rows.iter_mut().zip(metrics) {
        if !m.is_empty() && m.iter().all(Option::is_some) {
            row.micro_f1 = Some(m.iter().flatten().sum::<f64>() / m.len() as f64);
        }
    }
    Ok(CostReport {
        effective_date: pricing.effective_date.clone(),
        rows,
    })
}

impl CostReport {
    pub fn total_cost(&self) -> Decimal {
        self.rows.iter().map(|r| r.total_cost_usd).sum()
    }

    /// Aligned columns; costs rounded to cents for display only.
    pub fn to_text(&self) -> String {
        let header = ["model", "setting", "micro-f1", "cost", "calls", "attempts", "prompt_tok", "completion_tok", "est"];
        let body: Vec<[String; 9]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model_id.clone(),
                    r.setting.clone(),
                    r.micro_f1.map_or("-".into(), |f| format!("{:.1}", 100.0 * f)),
                    format!("{}$", r.total_cost_usd.round_dp(2)),
                    r.calls.to_string(),
                    r.attempts.to_string(),
                    r.total_prompt_tokens.to_string(),
                    r.total_completion_tokens.to_string(),
                    if r.estimated { "*".into() } else { String::new() },
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = format!("# prices effective {}\n", self.effective_date);
        let mut line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&header.map(String::from));
        for row in &body {
            line(row);
        }
        if self.rows.iter().any(|r| r.estimated) {
            out.push_str("* usage includes estimator-derived token counts\n");
        }
        out
    }

    /// CSV with exact decimal costs.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record([
                "model_id",
                "setting",
                "micro_f1",
                "total_cost_usd",
                "calls",
                "attempts",
                "total_prompt_tokens",
                "total_completion_tokens",
                "estimated",
            ])
            .expect("in-memory csv");
        for r in &self.rows {
            writer
                .write_record([
                    r.model_id.clone(),
                    r.setting.clone(),
                    r.micro_f1.map_or(String::new(), |f| f.to_string()),
                    r.total_cost_usd.normalize().to_string(),
                    r.calls.to_string(),
                    r.attempts.to_string(),
                    r.total_prompt_tokens.to_string(),
                    r.total_completion_tokens.to_string(),
                    r.estimated.to_string(),
                ])
                .expect("in-memory csv");
        }
        String::from_utf8(writer.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}
