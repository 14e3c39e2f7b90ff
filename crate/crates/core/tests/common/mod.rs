#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fewshot_core::corpus::{write_records, LabelSet, Record};
use fewshot_core::promptkit::{PromptBundle, Role};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEMS: [&str; 10] = [
    "amber", "birch", "cobalt", "dune", "ember", "fjord", "garnet", "harbor", "iris", "juniper",
];
pub const WORDS_PER_CLASS: usize = 6;
pub const WORDS_PER_TEXT: usize = 5;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn separable_labels() -> LabelSet {
    LabelSet::new(STEMS.iter().map(|s| format!("topic_{s}"))).unwrap()
}

/// Texts of five distinct words drawn from a class-private vocabulary.
pub fn separable_texts(class: usize, count: usize, seed: u64) -> Vec<String> {
    let vocab: Vec<String> = (0..WORDS_PER_CLASS).map(|j| format!("{}{j}", STEMS[class])).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64);
    (0..count)
        .map(|_| {
            let words: Vec<&str> = vocab.choose_multiple(&mut rng, WORDS_PER_TEXT).map(String::as_str).collect();
            words.join(" ")
        })
        .collect()
}

/// Writes `train.jsonl` and `test.jsonl` for the ten-class separable set.
pub fn write_separable(dir: &Path, train_per_class: usize, test_per_class: usize) -> (PathBuf, PathBuf) {
    let labels = separable_labels();
    let write = |name: &str, per_class: usize, seed: u64| {
        let path = dir.join(name);
        let records = (0..labels.len()).flat_map(|c| {
            let label = labels.name(c).to_string();
            separable_texts(c, per_class, seed).into_iter().map(move |text| Record {
                text,
                label: label.clone(),
                origin: None,
                rank: None,
                group_id: None,
            })
        });
        write_records(&path, records.collect::<Vec<_>>()).unwrap();
        path
    };
    (write("train.jsonl", train_per_class, 1), write("test.jsonl", test_per_class, 2))
}

/// Plain-text dump used by the golden prompt files.
pub fn dump_bundle(bundle: &PromptBundle) -> String {
    let mut out = String::new();
    for m in &bundle.messages {
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        out.push_str(&format!("=== {role} ===\n{}\n", m.content));
    }
    out
}

/// Compares `actual` with a golden file; `FEWSHOT_BLESS=1` rewrites it.
pub fn golden(name: &str, actual: &str) -> Result<(), String> {
    let path = fixture("golden").join(name);
    if std::env::var_os("FEWSHOT_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .map_or_else(|| "length".to_string(), |i| format!("line {}", i + 1));
        Err(format!("{name} differs from golden at {line}"))
    }
}
