//! C ABI over `fewshot-core`.
//!
//! Every function returns an [`FsStatus`]; on failure the message is
//! available from [`fs_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Strings
//! returned through `out` parameters are owned by the caller and released
//! with [`fs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fewshot_core::corpus::{banking77_label_set, LabelSet};
use fewshot_core::embedder::{test_embed, EmbeddingVector};
use fewshot_core::evaluator::{confusion, macro_f1, micro_f1};
use fewshot_core::labelspace::{canonicalize, parse_prediction, Outcome, ParseRule};
use fewshot_core::ledger::{price_tokens, ModelPrice};
use fewshot_core::retriever::{format_pool_fraction, ExemplarIndex};
use rust_decimal::Decimal;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Panic = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsParseRule {
    IndexMatch = 0,
    UnknownMarker = 1,
    ExactName = 2,
    UniqueSubstring = 3,
    Fallback = 4,
}

impl From<ParseRule> for FsParseRule {
    fn from(rule: ParseRule) -> Self {
        match rule {
            ParseRule::IndexMatch => FsParseRule::IndexMatch,
            ParseRule::UnknownMarker => FsParseRule::UnknownMarker,
            ParseRule::ExactName => FsParseRule::ExactName,
            ParseRule::UniqueSubstring => FsParseRule::UniqueSubstring,
            ParseRule::Fallback => FsParseRule::Fallback,
        }
    }
}

/// Opaque label set.
pub struct FsLabelSet(LabelSet);

/// Opaque exact nearest-neighbour index.
pub struct FsIndex(ExemplarIndex);

struct Failure(FsStatus, String);

impl Failure {
    fn invalid(message: impl ToString) -> Self {
        Failure(FsStatus::InvalidArgument, message.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = text);
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            FsStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| panic.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            set_last_error(&format!("internal panic: {message}"));
            FsStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(FsStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(FsStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn write_string(out: *mut *mut c_char, value: String) -> Result<(), Failure> {
    non_null(out, "out")?;
    let c = CString::new(value).map_err(Failure::invalid)?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn fs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn fs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_canonicalize(text: *const c_char, out: *mut *mut c_char) -> FsStatus {
    guard(|| write_string(out, canonicalize(read_str(text, "text")?)))
}

/// Builds a label set from `count` names.
///
/// # Safety
/// `names` must point to `count` NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fs_label_set_new(
    names: *const *const c_char,
    count: usize,
    out: *mut *mut FsLabelSet,
) -> FsStatus {
    guard(|| {
        non_null(out, "out")?;
        let names = slice(names, count, "names")?
            .iter()
            .map(|&p| read_str(p, "name"))
            .collect::<Result<Vec<_>, _>>()?;
        let set = LabelSet::new(names).map_err(Failure::invalid)?;
        *out = Box::into_raw(Box::new(FsLabelSet(set)));
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_label_set_banking77(out: *mut *mut FsLabelSet) -> FsStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(FsLabelSet(banking77_label_set())));
        Ok(())
    })
}

/// Number of labels, or 0 for a null handle.
///
/// # Safety
/// `labels` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fs_label_set_len(labels: *const FsLabelSet) -> usize {
    labels.as_ref().map_or(0, |l| l.0.len())
}

/// # Safety
/// `labels` must come from `fs_label_set_new`/`fs_label_set_banking77`
/// and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_label_set_free(labels: *mut FsLabelSet) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

/// Parses a model answer. `out_label` receives the label index or -1 for
/// Unknown.
///
/// # Safety
/// Pointers must be valid; `raw` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fs_parse_prediction(
    labels: *const FsLabelSet,
    raw: *const c_char,
    out_label: *mut i64,
    out_rule: *mut FsParseRule,
) -> FsStatus {
    guard(|| {
        non_null(labels, "labels")?;
        non_null(out_label, "out_label")?;
        non_null(out_rule, "out_rule")?;
        let p = parse_prediction(read_str(raw, "raw")?, &(*labels).0);
        *out_label = match p.outcome {
            Outcome::Label(i) => i as i64,
            Outcome::Unknown => -1,
        };
        *out_rule = p.parse_rule.into();
        Ok(())
    })
}

/// Writes the deterministic offline embedding of `text` into `out[0..dim)`.
///
/// # Safety
/// `out` must have room for `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn fs_test_embed(text: *const c_char, dim: usize, out: *mut f32) -> FsStatus {
    guard(|| {
        non_null(out, "out")?;
        let v = test_embed(read_str(text, "text")?, dim).map_err(Failure::invalid)?;
        ptr::copy_nonoverlapping(v.as_slice().as_ptr(), out, dim);
        Ok(())
    })
}

/// Builds an index over `n` row-major unit vectors of length `dim`.
///
/// # Safety
/// `vectors` must hold `n * dim` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_index_new(vectors: *const f32, n: usize, dim: usize, out: *mut *mut FsIndex) -> FsStatus {
    guard(|| {
        non_null(out, "out")?;
        if dim == 0 {
            return Err(Failure::invalid("dim must be > 0"));
        }
        let total = n.checked_mul(dim).ok_or_else(|| Failure::invalid("n * dim overflows"))?;
        let rows = slice(vectors, total, "vectors")?
            .chunks(dim)
            .map(|row| EmbeddingVector::from_unit(row.to_vec()).map_err(Failure::invalid))
            .collect::<Result<Vec<_>, _>>()?;
        let index = ExemplarIndex::from_vectors(&rows).map_err(Failure::invalid)?;
        *out = Box::into_raw(Box::new(FsIndex(index)));
        Ok(())
    })
}

/// # Safety
/// `index` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fs_index_len(index: *const FsIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.len())
}

/// Exact top-`k` by cosine similarity. Ties go to the lower id.
/// `k` must lie in `1..=fs_index_len(index)`.
///
/// # Safety
/// `query` must hold `dim` floats; `out_ids` and `out_similarities` room
/// for `k` values each.
#[no_mangle]
pub unsafe extern "C" fn fs_index_top_k(
    index: *const FsIndex,
    query: *const f32,
    dim: usize,
    k: usize,
    out_ids: *mut usize,
    out_similarities: *mut f64,
) -> FsStatus {
    guard(|| {
        non_null(index, "index")?;
        non_null(out_ids, "out_ids")?;
        non_null(out_similarities, "out_similarities")?;
        let q = EmbeddingVector::from_unit(slice(query, dim, "query")?.to_vec()).map_err(Failure::invalid)?;
        let hits = (*index).0.top_k(&q, k).map_err(Failure::invalid)?;
        for (i, hit) in hits.iter().enumerate() {
            *out_ids.add(i) = hit.exemplar_id;
            *out_similarities.add(i) = hit.similarity;
        }
        Ok(())
    })
}

/// # Safety
/// `index` must come from `fs_index_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_index_free(index: *mut FsIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Micro- and macro-F1 over `n` items. A predicted value of -1 (or any
/// value outside `[0, classes)`) counts as Unknown.
///
/// # Safety
/// `predicted` and `gold` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn fs_f1_scores(
    predicted: *const i64,
    gold: *const usize,
    n: usize,
    classes: usize,
    out_micro: *mut f64,
    out_macro: *mut f64,
) -> FsStatus {
    guard(|| {
        non_null(out_micro, "out_micro")?;
        non_null(out_macro, "out_macro")?;
        let outcomes: Vec<Outcome> = slice(predicted, n, "predicted")?
            .iter()
            .map(|&p| match usize::try_from(p) {
                Ok(i) if i < classes => Outcome::Label(i),
                _ => Outcome::Unknown,
            })
            .collect();
        let matrix = confusion(&outcomes, slice(gold, n, "gold")?, classes).map_err(Failure::invalid)?;
        *out_micro = micro_f1(&matrix).map_err(Failure::invalid)?;
        *out_macro = macro_f1(&matrix).map_err(Failure::invalid)?;
        Ok(())
    })
}

/// Exact USD cost of one call; prices are decimal strings per 1,000 tokens
/// and the result is a decimal string.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_price_call(
    prompt_tokens: u64,
    completion_tokens: u64,
    input_per_1k: *const c_char,
    output_per_1k: *const c_char,
    out: *mut *mut c_char,
) -> FsStatus {
    guard(|| {
        let parse = |p, name| -> Result<Decimal, Failure> {
            let text = read_str(p, name)?;
            let value: Decimal = text
                .trim()
                .parse()
                .map_err(|_| Failure::invalid(format!("{name}: {text:?} is not a decimal")))?;
            if value.is_sign_negative() {
                return Err(Failure::invalid(format!("{name} is negative")));
            }
            Ok(value)
        };
        let price = ModelPrice {
            input_per_1k: parse(input_per_1k, "input_per_1k")?,
            output_per_1k: parse(output_per_1k, "output_per_1k")?,
        };
        let cost = price_tokens(prompt_tokens, completion_tokens, &price).normalize();
        write_string(out, cost.to_string())
    })
}

/// `k` as a percentage of `pool` at one decimal, e.g. "2.2%".
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_format_pool_fraction(k: usize, pool: usize, out: *mut *mut c_char) -> FsStatus {
    guard(|| {
        if pool == 0 {
            return Err(Failure::invalid("pool must be > 0"));
        }
        write_string(out, format_pool_fraction(k, pool))
    })
}
