//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the verdicts always reach stdout.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use fewshot_core::corpus::{
    banking77_label_set, mix_augmented, sample_few_shot, write_records, Dataset, ExemplarSet, LabelSet, LabeledUtterance, Origin,
    Record, SamplingPlan, Split,
};
use fewshot_core::embedder::{test_embed, EmbeddingVector};
use fewshot_core::evaluator::{confusion, macro_f1, micro_f1, top_misclassified, EvalReport};
use fewshot_core::gateway::{
    run_batch, CallError, ChatBackend, Dialect, Gateway, ProviderConfig, RawCompletion, RetryPolicy,
};
use fewshot_core::labelspace::{parse_prediction, Outcome};
use fewshot_core::ledger::{build_report, price_tokens, Ledger, PricingTable, ReportRun, UsageRecord};
use fewshot_core::pipeline::{
    cmd_rerun, cmd_run_fewshot, cmd_run_rag, detect_drift, Context, ExemplarSource, RunOptions, Settings,
};
use fewshot_core::promptkit::{
    encoded_examples, render_classification_prompt, Placement, PromptBundle, PromptTemplate,
};
use fewshot_core::retriever::{format_pool_fraction, ExemplarIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        if let Ok(unit) = EmbeddingVector::new(v) {
            return unit;
        }
    }
}

/// Brute force: every similarity in f64, stable sort so ties keep index order.
fn brute_force_top_k(pool: &[EmbeddingVector], query: &EmbeddingVector, k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = pool
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = v
                .as_slice()
                .iter()
                .zip(query.as_slice())
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum();
            (i, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    scored
}

fn c1_retrieval_exactness() -> Verdict {
    let dim = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut elapsed = Duration::ZERO;
    let mut checked = 0;
    for n in [10usize, 231, 5_000] {
        let pool: Vec<_> = (0..n).map(|_| random_unit(&mut rng, dim)).collect();
        let index = ExemplarIndex::from_vectors(&pool).map_err(|e| e.to_string())?;
        let queries: Vec<_> = (0..200).map(|_| random_unit(&mut rng, dim)).collect();
        for k in [1usize, 5, 10, 20] {
            let k = k.min(n);
            for q in &queries {
                let start = Instant::now();
                let hits = index.top_k(q, k).map_err(|e| e.to_string())?;
                elapsed += start.elapsed();
                let oracle = brute_force_top_k(&pool, q, k);
                check!(hits.len() == oracle.len(), "n={n} k={k}: {} hits, oracle {}", hits.len(), oracle.len());
                for (rank, (hit, (id, sim))) in hits.iter().zip(&oracle).enumerate() {
                    check!(hit.exemplar_id == *id, "n={n} k={k} rank {rank}: id {} vs {id}", hit.exemplar_id);
                    check!(hit.rank == rank + 1, "n={n} k={k}: rank field {} at position {rank}", hit.rank);
                    check!((hit.similarity - sim).abs() <= 1e-6, "n={n} k={k}: sim {} vs {sim}", hit.similarity);
                }
                checked += 1;
            }
        }
    }
    check!(elapsed < Duration::from_secs(10), "retrieval took {elapsed:?}");
    Ok(format!("{checked} queries match brute force, retrieval time {:.2?}", elapsed))
}

fn c2_fraction_strings() -> Verdict {
    for (k, want) in [(5, "2.2%"), (10, "4.3%"), (20, "8.7%")] {
        let got = format_pool_fraction(k, 231);
        check!(got == want, "k={k}: {got} != {want}");
    }
    Ok("2.2% / 4.3% / 8.7%".into())
}

/// Reference metrics straight from the prediction and gold lists.
fn reference_metrics(pred: &[Option<usize>], gold: &[usize], classes: usize) -> (f64, f64, f64) {
    let n = gold.len() as f64;
    let correct = pred.iter().zip(gold).filter(|(p, g)| **p == Some(**g)).count() as f64;
    let accuracy = correct / n;
    let mut tp = vec![0f64; classes];
    let mut fp = vec![0f64; classes];
    let mut fn_ = vec![0f64; classes];
    let (mut pooled_tp, mut pooled_fp, mut pooled_fn) = (0f64, 0f64, 0f64);
    for (p, &g) in pred.iter().zip(gold) {
        match p {
            Some(p) if *p == g => {
                tp[g] += 1.0;
                pooled_tp += 1.0;
            }
            Some(p) => {
                fp[*p] += 1.0;
                fn_[g] += 1.0;
                pooled_fp += 1.0;
                pooled_fn += 1.0;
            }
            None => {
                fn_[g] += 1.0;
                pooled_fp += 1.0;
                pooled_fn += 1.0;
            }
        }
    }
    let f1 = |tp: f64, fp: f64, fn_: f64| {
        let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let r = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    let micro = f1(pooled_tp, pooled_fp, pooled_fn);
    let macro_ = (0..classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / classes as f64;
    (micro, macro_, accuracy)
}

fn c3_metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut with_unknown = 0;
    for case in 0..500 {
        let classes = rng.gen_range(1..=10);
        let n = rng.gen_range(1..=200);
        let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let pred: Vec<Option<usize>> = gold
            .iter()
            .map(|&g| match rng.gen_range(0..10) {
                0 => None,
                1..=5 => Some(g),
                _ => Some(rng.gen_range(0..classes)),
            })
            .collect();
        if pred.contains(&None) {
            with_unknown += 1;
        }
        let outcomes: Vec<Outcome> = pred.iter().map(|p| p.map_or(Outcome::Unknown, Outcome::Label)).collect();
        let matrix = confusion(&outcomes, &gold, classes).map_err(|e| e.to_string())?;
        let (micro, macro_) = (micro_f1(&matrix).unwrap(), macro_f1(&matrix).unwrap());
        let (ref_micro, ref_macro, accuracy) = reference_metrics(&pred, &gold, classes);
        check!((micro - ref_micro).abs() <= 1e-9, "case {case}: micro {micro} vs {ref_micro}");
        check!((macro_ - ref_macro).abs() <= 1e-9, "case {case}: macro {macro_} vs {ref_macro}");
        check!((micro - accuracy).abs() <= 1e-9, "case {case}: micro {micro} != accuracy {accuracy}");
    }

    let gold = [0, 0, 1, 1, 2, 2];
    let pred = [
        Outcome::Label(0),
        Outcome::Label(1),
        Outcome::Label(1),
        Outcome::Label(1),
        Outcome::Unknown,
        Outcome::Label(2),
    ];
    let m = confusion(&pred, &gold, 3).unwrap();
    let cells = [(0, 0, 1), (0, 1, 1), (1, 1, 2), (2, 3, 1), (2, 2, 1)];
    for (r, c, v) in cells {
        check!(m.get(r, c) == v, "hand case cell ({r},{c}) = {}", m.get(r, c));
    }
    check!(m.total() == 6, "hand case total {}", m.total());
    let micro = micro_f1(&m).unwrap();
    let macro_ = macro_f1(&m).unwrap();
    check!((micro - 4.0 / 6.0).abs() <= 1e-9, "hand micro {micro}");
    check!((macro_ - 0.7111).abs() <= 1e-4, "hand macro {macro_}");
    let top: Vec<usize> = top_misclassified(&m, 2).iter().map(|t| t.label).collect();
    check!(top == [0, 2], "hand top-2 {top:?}");
    Ok(format!("500 random cases ({with_unknown} with Unknown) and the hand case agree"))
}

fn c4_misclassification_rate() -> Verdict {
    let labels = banking77_label_set();
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for c in 0..labels.len() {
        for i in 0..40 {
            gold.push(c);
            let wrong = if c == 20 { i < 35 } else { i < 2 };
            pred.push(match (wrong, i % 7) {
                (false, _) => Outcome::Label(c),
                (true, 0) => Outcome::Unknown,
                (true, _) => Outcome::Label((c + 1) % labels.len()),
            });
        }
    }
    let matrix = confusion(&pred, &gold, labels.len()).unwrap();
    let top = top_misclassified(&matrix, 1);
    check!(top[0].label == 20, "top label {}", top[0].label);
    check!(top[0].misclassification_rate == 0.875, "rate {}", top[0].misclassification_rate);
    let report = EvalReport::build(&matrix, &labels, 5).unwrap();
    let text = report.to_text(1);
    let line = text.lines().find(|l| l.starts_with(labels.name(20))).unwrap_or_default();
    check!(line.contains("87.5%"), "report line {line:?}");
    Ok(format!("{} at 87.5% (35/40)", labels.name(20)))
}

fn golden_exemplars() -> ExemplarSet {
    ExemplarSet::load(&common::fixture("banking77_3shot.jsonl"), &banking77_label_set()).unwrap()
}

fn multiset(bundle: &PromptBundle) -> BTreeMap<(String, String), usize> {
    let mut m = BTreeMap::new();
    for pair in encoded_examples(bundle) {
        *m.entry(pair).or_insert(0) += 1;
    }
    m
}

fn c5_golden_prompts() -> Verdict {
    let labels = banking77_label_set();
    let set = golden_exemplars();
    check!(set.len() == 231, "fixture has {} exemplars", set.len());
    let template = PromptTemplate::builtin();
    let all: Vec<_> = set.exemplars().iter().enumerate().collect();
    let query = "I am still waiting on my card?";
    let system = render_classification_prompt(&template, &labels, &all, query, Placement::SystemContext).unwrap();
    common::golden("system_context_231.txt", &common::dump_bundle(&system))?;

    let pair: Vec<_> = all[..2].to_vec();
    let chat = render_classification_prompt(&template, &labels, &pair, query, Placement::ChatHistory).unwrap();
    check!(chat.messages.len() == 6, "chat prompt has {} messages", chat.messages.len());
    common::golden("chat_history_2.txt", &common::dump_bundle(&chat))?;

    let chat_all = render_classification_prompt(&template, &labels, &all, query, Placement::ChatHistory).unwrap();
    check!(multiset(&system) == multiset(&chat_all), "231-example multisets differ across placements");
    let system_pair = render_classification_prompt(&template, &labels, &pair, query, Placement::SystemContext).unwrap();
    check!(multiset(&system_pair) == multiset(&chat), "2-example multisets differ across placements");
    check!(multiset(&system).values().sum::<usize>() == 231, "system prompt does not carry 231 examples");
    Ok(format!("both goldens byte-identical, system prompt ~{} tokens", system.estimated_tokens))
}

fn fewshot_cli(args: &[String]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fewshot"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("fewshot {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn centroid_cosines_below(threshold: f64) -> Result<f64, String> {
    let centroids: Vec<Vec<f64>> = (0..common::STEMS.len())
        .map(|c| {
            let mut sum = vec![0f64; 384];
            for text in common::separable_texts(c, 10, 1) {
                for (acc, v) in sum.iter_mut().zip(test_embed(&text, 384).unwrap().as_slice()) {
                    *acc += f64::from(*v);
                }
            }
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            sum.into_iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut worst: f64 = 0.0;
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            worst = worst.max(centroids[a].iter().zip(&centroids[b]).map(|(x, y)| x * y).sum());
        }
    }
    if worst < threshold {
        Ok(worst)
    } else {
        Err(format!("inter-centroid cosine {worst} >= {threshold}"))
    }
}

fn c6_end_to_end() -> Verdict {
    let worst = centroid_cosines_below(0.3)?;
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (train, test) = common::write_separable(dir.path(), 10, 8);
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let (train, test) = (train.to_string_lossy().into_owned(), test.to_string_lossy().into_owned());
    let (runs, cache, exemplars) = (d("runs"), d("cache.fiec"), d("exemplars.jsonl"));
    let base = ["--runs-dir", &runs, "--cache", &cache];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };

    fewshot_cli(&with(&["sample", "--train", &train, "--out", &exemplars, "--shots", "3", "--seed", "11"]))?;
    fewshot_cli(&with(&["embed", &exemplars, &test]))?;
    let mut reports = Vec::new();
    for run_id in ["first", "second"] {
        fewshot_cli(&with(&["run", "fewshot", "--exemplars", &exemplars, "--test", &test, "--run-id", run_id]))?;
        let manifest = format!("{runs}/{run_id}");
        reports.push(fewshot_cli(&with(&["evaluate", &manifest, "--format", "json"]))?);
    }
    let elapsed = start.elapsed();
    let report: serde_json::Value = serde_json::from_str(&reports[0]).map_err(|e| e.to_string())?;
    check!(report["micro_f1"] == 1.0, "micro-F1 {}", report["micro_f1"]);
    check!(report["macro_f1"] == 1.0, "macro-F1 {}", report["macro_f1"]);
    check!(report["instances"] == 80, "instances {}", report["instances"]);
    check!(reports[0] == reports[1], "two runs gave different reports");
    check!(elapsed < Duration::from_secs(30), "pipeline took {elapsed:?}");
    Ok(format!("µ-F1 = m-F1 = 1.0 on 80 items twice, max centroid cosine {worst:.3}, {elapsed:.2?}"))
}

fn offline(dir: &Path) -> Context {
    let mut settings = Settings {
        runs_dir: dir.join("runs"),
        labels: Some("banking77".into()),
        ..Settings::default()
    };
    settings.embedding.cache = dir.join("cache.fiec");
    Context::offline(settings)
}

fn c7_rag_cost_mechanism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut ctx = offline(dir.path());
    let pool = common::fixture("banking77_3shot.jsonl");
    let queries = common::fixture("banking77_queries.jsonl");
    let mut means = Vec::new();
    for k in [5usize, 20] {
        ctx.settings.k = k;
        let run = cmd_run_rag(&ctx, &pool, &queries, &RunOptions::default()).map_err(|e| e.to_string())?;
        let m = &run.manifest;
        check!(m.records.iter().all(|r| r.exemplar_ids.len() == k), "k={k}: record without {k} exemplars");
        means.push(m.mean_estimated_tokens);
    }
    let classic = cmd_run_fewshot(&ctx, &ExemplarSource::File(pool), &queries, &RunOptions::default())
        .map_err(|e| e.to_string())?;
    let full = classic.manifest.mean_estimated_tokens;
    check!(
        classic.manifest.records.iter().all(|r| r.exemplar_ids.len() == 231),
        "classic run without 231 exemplars"
    );
    check!(means[0] < means[1] && means[1] < full, "means k5 {} k20 {} classic {full}", means[0], means[1]);
    check!((4_096.0..16_384.0).contains(&full), "classic estimate {full} outside (4096, 16384)");
    Ok(format!("mean tokens: k=5 {:.1} < k=20 {:.1} < 3-shot {full:.1}", means[0], means[1]))
}

fn c8_cost_arithmetic() -> Verdict {
    let pricing = PricingTable::new("2024-01-01").with_model("gpt-4", Decimal::new(3, 2), Decimal::new(6, 2));
    let mut ledger = Ledger::new();
    ledger.begin_run("r");
    let mut per_call = Decimal::ZERO;
    let price = pricing.price("gpt-4").unwrap();
    for i in 0..3_080u64 {
        ledger
            .append(UsageRecord {
                run_id: "r".into(),
                call_index: i as usize,
                model_id: "gpt-4".into(),
                prompt_tokens: 2_000,
                completion_tokens: 10,
                estimated: false,
                attempts: 1,
                delivered: true,
            })
            .unwrap();
        per_call += price_tokens(2_000, 10, price);
    }
    let runs = [ReportRun {
        run_id: "r".into(),
        setting: "3-shot".into(),
        micro_f1: None,
    }];
    let report = build_report(&ledger, &runs, &pricing).map_err(|e| e.to_string())?;
    let expected: Decimal = "186.648".parse().unwrap();
    let aggregate = price_tokens(3_080 * 2_000, 3_080 * 10, price);
    check!(report.total_cost() == expected, "total {}", report.total_cost());
    check!(per_call == aggregate, "per-call {per_call} != aggregate {aggregate}");
    check!(per_call.to_string() == aggregate.to_string(), "representations differ");
    Ok(format!("${} exact", report.total_cost().normalize()))
}

fn c9_sampling_counts() -> Verdict {
    let labels = banking77_label_set();
    let originals: Vec<LabeledUtterance> = (0..labels.len())
        .flat_map(|c| {
            (0..25).map(move |i| LabeledUtterance {
                text: format!("original {i} of class {c}"),
                label: c,
                origin: Origin::Original,
            })
        })
        .collect();
    let dataset = Dataset {
        label_set: labels.clone(),
        items: originals,
        split: Split::Train,
    };
    let three = sample_few_shot(&dataset, &SamplingPlan::random(3, 2024)).map_err(|e| e.to_string())?;
    check!(three.len() == 231, "3-shot gave {}", three.len());
    check!(three.class_counts().iter().all(|&n| n == 3), "uneven 3-shot counts");
    let generated = ExemplarSet::from_items(
        labels.clone(),
        (0..labels.len())
            .flat_map(|c| {
                (0..20).map(move |i| LabeledUtterance {
                    text: format!("generated {i} of class {c}"),
                    label: c,
                    origin: Origin::Generated,
                })
            })
            .collect(),
    );
    for g in [2usize, 7, 12, 17] {
        let mixed = mix_augmented(&three, &generated, &SamplingPlan::mixed(3, g)).map_err(|e| e.to_string())?;
        for c in 0..labels.len() {
            let items: Vec<_> = mixed.of_class(c).collect();
            let orig = items.iter().filter(|i| i.origin == Origin::Original).count();
            let gen = items.iter().filter(|i| i.origin == Origin::Generated).count();
            check!(items.len() == 3 + g, "3:{g} class {c}: {} items", items.len());
            check!(orig == 3 && gen == g, "3:{g} class {c}: {orig} original, {gen} generated");
        }
    }
    Ok("231 exemplars; 3:2, 3:7, 3:12, 3:17 give 5, 10, 15, 20 per class".into())
}

fn c10_parser_fuzz() -> Verdict {
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};
    let labels = banking77_label_set();
    let c = labels.len();
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (any::<String>(), 0..c, 0..c, "[ \t]{0,3}", "[ \t\n]{0,3}");
    runner
        .run(&strategy, |(noise, i, j, lead, trail)| {
            let _ = parse_prediction(&noise, &labels);
            if i != j {
                let p = parse_prediction(&format!("{lead}{i} {}{trail}", labels.name(j)), &labels);
                prop_assert_eq!(p.outcome, Outcome::Label(i));
            }
            let u = parse_prediction(&format!("{lead}-1 Unknown{trail}"), &labels);
            prop_assert_eq!(u.outcome, Outcome::Unknown);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("10000 fuzzed strings: total, index wins, -1 Unknown is Unknown".into())
}

/// Echoes the query; counts concurrent calls; fails `q7` once.
struct Instrumented {
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    calls: Mutex<BTreeMap<String, u32>>,
}

impl ChatBackend for Instrumented {
    fn send(&self, bundle: &PromptBundle) -> Result<RawCompletion, CallError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_micros(200));
        let query = bundle.final_user_text().unwrap_or_default().to_string();
        let seen = {
            let mut calls = self.calls.lock().unwrap();
            let n = calls.entry(query.clone()).or_insert(0);
            *n += 1;
            *n
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        if query == "q7" && seen == 1 {
            return Err(CallError::Retryable("503 scripted".into()));
        }
        Ok(RawCompletion {
            text: query,
            usage: Some((10, 1)),
        })
    }
}

fn c11_batch_discipline() -> Verdict {
    let labels = LabelSet::new(["a", "b"]).unwrap();
    let template = PromptTemplate::builtin();
    let bundles: Vec<_> = (0..1_000)
        .map(|i| render_classification_prompt(&template, &labels, &[], &format!("q{i}"), Placement::SystemContext))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut config = ProviderConfig::new(Dialect::MockCentroidOracle, "instrumented");
    config.max_parallel = 4;
    config.retry = RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 1,
        backoff_factor: 2.0,
    };
    let backend = std::sync::Arc::new(Instrumented {
        in_flight: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
        calls: Mutex::new(BTreeMap::new()),
    });
    struct Shared(std::sync::Arc<Instrumented>);
    impl ChatBackend for Shared {
        fn send(&self, bundle: &PromptBundle) -> Result<RawCompletion, CallError> {
            self.0.send(bundle)
        }
    }
    let gateway = Gateway::new(config, Box::new(Shared(backend.clone()))).map_err(|e| e.to_string())?;
    let mut ledger = Ledger::new();
    let results = run_batch(&gateway, &bundles, "batch", &mut ledger).map_err(|e| format!("batch aborted: {e}"))?;
    let peak = backend.peak.load(Ordering::SeqCst);
    check!(peak <= 4, "peak in-flight {peak}");
    check!(results.len() == 1_000, "{} results", results.len());
    for (i, r) in results.iter().enumerate() {
        let r = r.as_ref().map_err(|e| format!("item {i}: {e}"))?;
        check!(r.raw_text == format!("q{i}"), "item {i} got {}", r.raw_text);
        let want = if i == 7 { 2 } else { 1 };
        check!(r.attempt_count == want, "item {i}: {} attempts", r.attempt_count);
    }
    check!(ledger.run("batch").map_or(0, <[_]>::len) == 1_000, "ledger incomplete");
    Ok(format!("peak in-flight {peak} <= 4, aligned, item 7 took 2 attempts"))
}

fn c12_manifest_replay() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ctx = offline(dir.path());
    let pool = common::fixture("banking77_3shot.jsonl");
    let labels = banking77_label_set();
    // Each query mixes two classes' wording, so some answers come back wrong.
    let queries = dir.path().join("blended.jsonl");
    let records: Vec<_> = (0..labels.len())
        .map(|c| {
            let words = |i: usize| labels.name(i % labels.len()).replace('_', " ");
            Record {
                text: format!("{} or rather {} {}", words(c), words(c + 1), words(c + 1)),
                label: labels.name(c).to_string(),
                origin: None,
                rank: None,
                group_id: None,
            }
        })
        .collect();
    write_records(&queries, records).map_err(|e| e.to_string())?;
    let original = cmd_run_fewshot(&ctx, &ExemplarSource::File(pool), &queries, &RunOptions::default())
        .map_err(|e| e.to_string())?;
    let manifest_path = original.dir.join("manifest.json");
    let drift = detect_drift(&original.manifest);
    check!(drift.is_empty(), "drift on untouched inputs: {drift:?}");
    let rerun = cmd_rerun(&ctx, &manifest_path, None, &RunOptions::default()).map_err(|e| e.to_string())?;
    let before = original.manifest.evaluate(10).map_err(|e| e.to_string())?;
    let after = rerun.run.manifest.evaluate(10).map_err(|e| e.to_string())?;
    check!(before.to_json() == after.to_json(), "JSON reports differ");
    check!(before.to_csv() == after.to_csv(), "CSV reports differ");
    check!(before.to_text(10) == after.to_text(10), "text reports differ");
    check!(rerun.drift.is_empty(), "rerun reported drift");
    check!(before.micro_f1 < 1.0, "no wrong answers to reproduce");
    Ok(format!("EvalReport identical after replay (µ-F1 {:.4})", before.micro_f1))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("retrieval exactness", c1_retrieval_exactness),
        ("retrieval fraction fidelity", c2_fraction_strings),
        ("metric oracles", c3_metric_oracles),
        ("misclassification-table shape", c4_misclassification_rate),
        ("golden prompts", c5_golden_prompts),
        ("end-to-end offline run", c6_end_to_end),
        ("RAG cost mechanism", c7_rag_cost_mechanism),
        ("cost arithmetic", c8_cost_arithmetic),
        ("sampling counts", c9_sampling_counts),
        ("parser totality and precedence", c10_parser_fuzz),
        ("batch discipline", c11_batch_discipline),
        ("manifest reproducibility", c12_manifest_replay),
    ];
    let mut failed = 0;
    for (i, (name, criterion)) in criteria.iter().enumerate() {
        let verdict = catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(detail) => println!("PASS  {:>2}  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {:>2}  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
