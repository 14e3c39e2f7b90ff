use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use fewshot_core::corpus::banking77_label_set;
use fewshot_core::embedder::test_embed;
use fewshot_ffi::*;

fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_owned();
    unsafe { fs_string_free(s) };
    out
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(fs_last_error_message()) }.to_str().unwrap().to_owned()
}

#[test]
fn canonicalize_round_trips_strings() {
    let text = CString::new("  Card Arrival ").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { fs_canonicalize(text.as_ptr(), &mut out) }, FsStatus::Ok);
    assert_eq!(take(out), "card_arrival");
    assert_eq!(last_error(), "");
}

#[test]
fn null_and_bad_utf8_are_reported() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { fs_canonicalize(ptr::null(), &mut out) }, FsStatus::NullPointer);
    assert!(last_error().contains("text"));
    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { fs_canonicalize(bad.as_ptr().cast(), &mut out) },
        FsStatus::InvalidUtf8
    );
    assert!(out.is_null());
}

#[test]
fn label_sets_and_parsing() {
    let names: Vec<CString> = ["Alpha", "beta gamma", "delta"].iter().map(|n| CString::new(*n).unwrap()).collect();
    let ptrs: Vec<*const c_char> = names.iter().map(|n| n.as_ptr()).collect();
    let mut set = ptr::null_mut();
    assert_eq!(unsafe { fs_label_set_new(ptrs.as_ptr(), ptrs.len(), &mut set) }, FsStatus::Ok);
    assert_eq!(unsafe { fs_label_set_len(set) }, 3);

    let cases = [
        ("1", 1, FsParseRule::IndexMatch),
        ("Unknown", -1, FsParseRule::UnknownMarker),
        ("delta", 2, FsParseRule::ExactName),
        ("i think beta_gamma fits", 1, FsParseRule::UniqueSubstring),
        ("no idea", -1, FsParseRule::Fallback),
    ];
    for (raw, label, rule) in cases {
        let raw = CString::new(raw).unwrap();
        let (mut got, mut got_rule) = (-9i64, FsParseRule::Fallback);
        assert_eq!(unsafe { fs_parse_prediction(set, raw.as_ptr(), &mut got, &mut got_rule) }, FsStatus::Ok);
        assert_eq!((got, got_rule), (label, rule), "{raw:?}");
    }
    unsafe { fs_label_set_free(set) };

    let dup: Vec<*const c_char> = vec![ptrs[0], ptrs[0]];
    let mut set = ptr::null_mut();
    assert_eq!(unsafe { fs_label_set_new(dup.as_ptr(), 2, &mut set) }, FsStatus::InvalidArgument);
    assert!(set.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { fs_label_set_banking77(&mut set) }, FsStatus::Ok);
    assert_eq!(unsafe { fs_label_set_len(set) }, banking77_label_set().len());
    unsafe { fs_label_set_free(set) };
    assert_eq!(unsafe { fs_label_set_len(ptr::null()) }, 0);
}

#[test]
fn embedding_matches_core() {
    let text = CString::new("where is my card").unwrap();
    let mut buf = vec![0f32; 64];
    assert_eq!(unsafe { fs_test_embed(text.as_ptr(), 64, buf.as_mut_ptr()) }, FsStatus::Ok);
    assert_eq!(buf, test_embed("where is my card", 64).unwrap().as_slice());
    assert_eq!(unsafe { fs_test_embed(text.as_ptr(), 0, buf.as_mut_ptr()) }, FsStatus::InvalidArgument);
}

#[test]
fn index_top_k_orders_by_similarity() {
    let s = std::f32::consts::FRAC_1_SQRT_2;
    let rows = [1.0, 0.0, 0.0, 1.0, s, s, -1.0, 0.0];
    let mut index = ptr::null_mut();
    assert_eq!(unsafe { fs_index_new(rows.as_ptr(), 4, 2, &mut index) }, FsStatus::Ok);
    assert_eq!(unsafe { fs_index_len(index) }, 4);

    let query = [1.0f32, 0.0];
    let (mut ids, mut sims) = ([0usize; 3], [0f64; 3]);
    let status = unsafe { fs_index_top_k(index, query.as_ptr(), 2, 3, ids.as_mut_ptr(), sims.as_mut_ptr()) };
    assert_eq!(status, FsStatus::Ok);
    assert_eq!(ids, [0, 2, 1]);
    assert!((sims[0] - 1.0).abs() < 1e-6 && (sims[1] - s as f64).abs() < 1e-6 && sims[2].abs() < 1e-6);

    let status = unsafe { fs_index_top_k(index, query.as_ptr(), 2, 5, ids.as_mut_ptr(), sims.as_mut_ptr()) };
    assert_eq!(status, FsStatus::InvalidArgument);
    unsafe { fs_index_free(index) };

    let not_unit = [2.0f32, 0.0];
    let mut index = ptr::null_mut();
    assert_eq!(unsafe { fs_index_new(not_unit.as_ptr(), 1, 2, &mut index) }, FsStatus::InvalidArgument);
    assert_eq!(unsafe { fs_index_new(ptr::null(), 1, 2, &mut index) }, FsStatus::NullPointer);
}

#[test]
fn f1_scores_by_hand() {
    // gold 0 0 1 2, predicted 0 1 1 unknown
    let predicted = [0i64, 1, 1, -1];
    let gold = [0usize, 0, 1, 2];
    let (mut micro, mut macro_) = (0.0, 0.0);
    let status = unsafe { fs_f1_scores(predicted.as_ptr(), gold.as_ptr(), 4, 3, &mut micro, &mut macro_) };
    assert_eq!(status, FsStatus::Ok);
    // one prediction per item, so micro-F1 is accuracy; Unknown is wrong
    assert!((micro - 0.5).abs() < 1e-12, "{micro}");
    // per class: 2/3, 2/3, 0
    assert!((macro_ - 4.0 / 9.0).abs() < 1e-12, "{macro_}");
}

#[test]
fn prices_are_exact_decimal_strings() {
    let (i, o) = (CString::new("0.03").unwrap(), CString::new("0.06").unwrap());
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { fs_price_call(1234, 56, i.as_ptr(), o.as_ptr(), &mut out) }, FsStatus::Ok);
    assert_eq!(take(out), "0.04038");
    let bad = CString::new("cheap").unwrap();
    assert_eq!(
        unsafe { fs_price_call(1, 1, bad.as_ptr(), o.as_ptr(), &mut out) },
        FsStatus::InvalidArgument
    );
    assert!(last_error().contains("cheap"));
    let neg = CString::new("-1").unwrap();
    assert_eq!(unsafe { fs_price_call(1, 1, neg.as_ptr(), o.as_ptr(), &mut out) }, FsStatus::InvalidArgument);
}

#[test]
fn pool_fraction() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { fs_format_pool_fraction(5, 231, &mut out) }, FsStatus::Ok);
    assert_eq!(take(out), "2.2%");
    assert_eq!(unsafe { fs_format_pool_fraction(5, 0, &mut out) }, FsStatus::InvalidArgument);
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn has_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok_and(|o| o.status.success())
}

#[test]
fn header_is_current_and_compiles() {
    let header = std::fs::read_to_string(crate_dir().join("include/fewshot.h")).unwrap();
    for symbol in [
        "fs_last_error_message",
        "fs_string_free",
        "fs_label_set_new",
        "fs_index_top_k",
        "fs_f1_scores",
        "fs_price_call",
        "FS_STATUS_INVALID_ARGUMENT",
        "typedef struct FsIndex FsIndex",
    ] {
        assert!(header.contains(symbol), "{symbol} missing from header");
    }
    if !has_cc() {
        eprintln!("cc not found; skipping C compile");
        return;
    }
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c/smoke.c"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn static_lib() -> Option<PathBuf> {
    // target/<profile>/deps/abi-<hash> -> target/<profile>
    let exe = std::env::current_exe().ok()?;
    let profile = exe.parent()?.parent()?;
    let lib = profile.join("libfewshot_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_and_runs() {
    let Some(lib) = static_lib().filter(|_| has_cc()) else {
        eprintln!("static library or cc unavailable; skipping link test");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new("cc")
        .args(["-std=c99", "-I"])
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(Path::new(&exe)).output().unwrap();
    assert_eq!(run.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&run.stdout), "ok\n");
}
