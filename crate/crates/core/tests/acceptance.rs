//! Acceptance gate: one PASS/FAIL/SKIP line per criterion, non-zero exit on
//! any failure. Runs without the browser UI.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use advqa_core::adversary::{self, AdversaryDescriptor, AdversaryKind, AdversaryRegistry, StubAdversary};
use advqa_core::analysis::{compute_stats, evaluate_map, parse_predictions};
use advqa_core::engine::{
    review_sample_size, Eligibility, Engine, EngineConfig, PassageSelector, ReviewVerdict, TrainingArtifact,
    TrainingTask, WorkerState,
};
use advqa_core::eventlog::{read_log, EventLogWriter, ManualClock};
use advqa_core::metrics::{self, adjudicate, AdjudicationPolicy};
use advqa_core::store::{
    export_dataset, parse_squad, split_stratified, to_squad_json, Dataset, ExportRequest, Passage, QaRecord,
    QuestionStatus, Span, Split,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass: Some(pass),
            detail: detail.into(),
        }
    }

    fn skip(detail: impl Into<String>) -> Self {
        Self {
            pass: None,
            detail: detail.into(),
        }
    }
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 7] = [
        ("metric_parity", Duration::from_secs(1), metric_parity),
        ("adjudication_oracle", Duration::from_secs(5), adjudication_oracle),
        ("filter_soundness", Duration::from_secs(30), filter_soundness),
        ("review_sampling", Duration::from_secs(1), review_sampling),
        ("quality_control_replay", Duration::from_secs(30), quality_control_replay),
        ("statistics_reproduction", Duration::from_secs(120), statistics_reproduction),
        ("round_trip", Duration::from_secs(30), round_trip),
    ];
    let mut failed = 0;
    for (name, budget, run) in criteria {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::check(false, format!("panicked: {msg}"))
        });
        let elapsed = started.elapsed();
        let (label, detail) = match outcome.pass {
            None => ("SKIP", outcome.detail),
            Some(true) if elapsed > budget => ("FAIL", format!("{} (over budget {budget:?})", outcome.detail)),
            Some(true) => ("PASS", outcome.detail),
            Some(false) => ("FAIL", outcome.detail),
        };
        if label == "FAIL" {
            failed += 1;
        }
        println!("{label} {name}: {detail} [{:.3}s]", elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn metric_parity() -> Outcome {
    let read = |f: &str| std::fs::read_to_string(Path::new(FIXTURES).join(f)).expect("fixture present");
    let dataset = parse_squad(&read("parity_dataset.json")).expect("fixture parses");
    let predictions = parse_predictions(&read("parity_predictions.json")).expect("predictions parse");
    let expected: serde_json::Value = serde_json::from_str(&read("parity_expected.json")).unwrap();
    let result = evaluate_map(&dataset, &predictions).expect("all questions predicted");

    let close = |a: f64, b: f64| (a - b).abs() < 5e-5;
    let want_em = expected["exact_match"].as_f64().unwrap();
    let want_f1 = expected["f1"].as_f64().unwrap();
    let mut mismatched = Vec::new();
    for q in &result.per_question {
        let e = &expected["per_question"][&q.id];
        if e["em"].as_bool() != Some(q.em) || !close(e["f1"].as_f64().unwrap_or(f64::NAN) * 100.0, q.f1 * 100.0) {
            mismatched.push(q.id.clone());
        }
    }
    let pass = dataset.questions.len() == 50 && close(result.em, want_em) && close(result.f1, want_f1) && mismatched.is_empty();
    Outcome::check(
        pass,
        format!(
            "EM {:.4} vs {want_em:.4}, F1 {:.4} vs {want_f1:.4}, {} per-question mismatches over {} questions",
            result.em,
            result.f1,
            mismatched.len(),
            dataset.questions.len()
        ),
    )
}

/// Counts shared tokens by brute force: for every distinct token, the smaller
/// of its two multiplicities.
fn brute_overlap(gold: &[String], pred: &[String]) -> usize {
    let distinct: BTreeSet<&String> = gold.iter().collect();
    distinct
        .into_iter()
        .map(|t| {
            let g = gold.iter().filter(|x| *x == t).count();
            let p = pred.iter().filter(|x| *x == t).count();
            g.min(p)
        })
        .sum()
}

fn oracle_f1(gold: &[String], pred: &[String]) -> f64 {
    if gold.is_empty() && pred.is_empty() {
        return 1.0;
    }
    let o = brute_overlap(gold, pred);
    if o == 0 {
        return 0.0;
    }
    let precision = o as f64 / pred.len() as f64;
    let recall = o as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// f1 ≥ 2/5 ⇔ 5·overlap ≥ |gold| + |pred|, in integers.
fn oracle_win(gold: &[String], pred: &[String]) -> bool {
    if gold.is_empty() && pred.is_empty() {
        return true;
    }
    5 * brute_overlap(gold, pred) >= gold.len() + pred.len()
}

fn adjudication_oracle() -> Outcome {
    const VOCAB: [&str; 12] = [
        "river", "Stadium", "bay", "Denver", "1850", "mill", "gold", "barn", "city", "red", "old", "york",
    ];
    const DECOR: [&str; 6] = ["", ".", ",", "!", "'s", "?"];
    let policy = AdjudicationPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let bag = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.random_range(0..7);
        (0..n)
            .map(|_| {
                let w = VOCAB.choose(rng).unwrap();
                let w = if rng.random_bool(0.3) { w.to_uppercase() } else { (*w).to_owned() };
                format!("{w}{}", DECOR.choose(rng).unwrap())
            })
            .collect::<Vec<_>>()
            .join(if rng.random_bool(0.5) { " " } else { "  " })
    };

    let mut pairs: Vec<(String, String)> = (0..10_000).map(|_| (bag(&mut rng), bag(&mut rng))).collect();
    // exact boundary: 5·overlap = |gold| + |pred| gives f1 = 0.4
    pairs.extend(
        [
            ("river", "the river flows south now"),
            ("river", "river flows south today"),
            ("red barn", "red mill gold"),
            ("red barn old", "red city"),
            ("w x y z", "w x e f g h"),
            ("the river", "River, mill; bay. city!"),
        ]
        .map(|(g, p)| (g.to_owned(), p.to_owned())),
    );
    let boundary_from = 10_000;

    let mut worst = 0.0f64;
    let mut win_mismatch = 0usize;
    let mut boundary_ok = true;
    for (i, (gold, pred)) in pairs.iter().enumerate() {
        let g = metrics::normalize(gold).into_inner();
        let p = metrics::normalize(pred).into_inner();
        let score = adjudicate(gold, pred, &policy);
        worst = worst.max((score.f1 - oracle_f1(&g, &p)).abs());
        if score.model_win != oracle_win(&g, &p) {
            win_mismatch += 1;
        }
        if i >= boundary_from {
            boundary_ok &= score.model_win && 5 * brute_overlap(&g, &p) == g.len() + p.len() && score.f1 == 0.4;
        }
    }
    let pass = worst <= 1e-12 && win_mismatch == 0 && boundary_ok;
    Outcome::check(
        pass,
        format!(
            "{} pairs, max |f1 - oracle| = {worst:.2e}, {win_mismatch} win mismatches, boundary cases {}",
            pairs.len(),
            if boundary_ok { "ok" } else { "wrong" }
        ),
    )
}

fn eligible() -> Eligibility {
    Eligibility {
        country: "US".into(),
        approval_rate: 0.99,
        lifetime_hits: 2000,
    }
}

fn training() -> Vec<TrainingArtifact> {
    TrainingTask::REQUIRED
        .iter()
        .flat_map(|(task, n)| {
            (0..*n).map(move |_| TrainingArtifact {
                task: *task,
                passage_id: None,
                question: "Who built the mill?".into(),
                answer: "the miller".into(),
            })
        })
        .collect()
}

fn qualify(engine: &mut Engine, worker: &str) {
    engine.register_worker(worker, eligible()).unwrap();
    let state = engine.qualification_flow(worker, training(), true).unwrap().state;
    assert_eq!(state, WorkerState::Qualified);
}

const WORDS: [&str; 40] = [
    "river", "valley", "castle", "merchant", "harbor", "king", "treaty", "bridge", "famine", "railway", "cathedral",
    "province", "emperor", "festival", "copper", "island", "library", "engine", "border", "senate", "colony",
    "monastery", "canal", "glacier", "vineyard", "fortress", "parliament", "dynasty", "orchard", "lighthouse",
    "quarry", "garrison", "mint", "forge", "market", "abbey", "tower", "meadow", "mill", "bay",
];

/// Synthetic passage of whitespace-separated words; returns the text and the
/// character extent of every word.
fn synthetic_passage(rng: &mut ChaCha8Rng, len: usize) -> (String, Vec<(usize, usize)>) {
    let mut text = String::new();
    let mut extents = Vec::new();
    for i in 0..len {
        if i > 0 {
            text.push(' ');
        }
        let w = WORDS.choose(rng).unwrap();
        let start = text.chars().count();
        text.push_str(w);
        extents.push((start, text.chars().count()));
    }
    text.push('.');
    (text, extents)
}

struct CollectionRun {
    log_path: PathBuf,
    live_snapshot: String,
    attempts: usize,
    rejected: usize,
}

/// Four workers each complete eight HITs of up to eight attempts against the
/// lexical baseline, logging to `dir`.
fn collection_run(dir: &Path) -> CollectionRun {
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    let mut passages = Vec::new();
    let mut extents = HashMap::new();
    for i in 0..40 {
        let (text, ext) = synthetic_passage(&mut rng, 45);
        let id = format!("p{i:02}");
        extents.insert(id.clone(), ext);
        passages.push(Passage {
            id,
            title: format!("Article {}", i / 4),
            text,
        });
    }
    let lexical = AdversaryDescriptor::new("lexical", AdversaryKind::LexicalWindow).build().unwrap();
    let mut registry = AdversaryRegistry::new();
    registry.insert(lexical);
    let log_path = dir.join("events.ndjson");
    let mut engine = Engine::new(EngineConfig::default(), registry)
        .with_clock(Arc::new(ManualClock::new(1_600_000_000_000, 1_500)))
        .with_sink(EventLogWriter::open(&log_path).unwrap());
    engine.load_passages(Split::Train, passages).unwrap();

    let (mut attempts, mut rejected) = (0, 0);
    for w in 0..4 {
        let worker = format!("worker-{w}");
        qualify(&mut engine, &worker);
        for _ in 0..8 {
            let hit = engine
                .open_generation_hit(&worker, "lexical", PassageSelector::Split(Split::Train))
                .unwrap()
                .clone();
            let text = engine.passage(&hit.passage_id).unwrap().passage.text.clone();
            let ext = &extents[&hit.passage_id];
            for _ in 0..8 {
                if engine.generation_hit(&hit.id).unwrap().retained.len() == hit.max_questions {
                    break;
                }
                let start = rng.random_range(0..ext.len() - 3);
                let len = rng.random_range(1..=3);
                let span = Span::from_offsets(&text, ext[start].0, ext[start + len - 1].1).unwrap();
                // half the questions echo the words around the answer, which the
                // lexical baseline tends to catch
                let question = if rng.random_bool(0.5) {
                    let lo = start.saturating_sub(3);
                    let hi = (start + len + 3).min(ext.len());
                    let context: Vec<&str> = (lo..hi)
                        .filter(|i| *i < start || *i >= start + len)
                        .map(|i| &text[ext[i].0..ext[i].1])
                        .collect();
                    format!("What is next to {}?", context.join(" "))
                } else {
                    format!("What is the {}?", WORDS.choose(&mut rng).unwrap())
                };
                let attempt = engine.submit_question(&hit.id, &question, span).unwrap();
                attempts += 1;
                if !attempt.retained() {
                    rejected += 1;
                }
            }
            engine.complete_hit(&hit.id).unwrap();
        }
    }
    engine.flush().unwrap();
    CollectionRun {
        log_path,
        live_snapshot: engine.snapshot_json(),
        attempts,
        rejected,
    }
}

fn filter_soundness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = collection_run(dir.path());
    let records = read_log(&run.log_path).unwrap();
    // replay with no adversary registered: predictions come from the log
    let replayed = Engine::replay(EngineConfig::default(), AdversaryRegistry::new(), records).unwrap();
    let bundle = export_dataset(
        replayed.state(),
        &ExportRequest {
            name: "synthetic".into(),
            splits: vec![Split::Train],
            adversary_id: Some("lexical".into()),
        },
    )
    .unwrap();
    let exported = &bundle.datasets[&Split::Train];

    let lexical = AdversaryDescriptor::new("lexical", AdversaryKind::LexicalWindow).build().unwrap();
    let passages = exported.passage_index();
    let predictions: BTreeMap<String, String> = exported
        .questions
        .iter()
        .map(|q| {
            let p = adversary::predict(lexical.as_ref(), passages[q.passage_id.as_str()], &q.question).unwrap();
            (q.id.clone(), p.text)
        })
        .collect();
    let result = evaluate_map(exported, &predictions).unwrap();
    let all_below = result.per_question.iter().all(|q| q.f1 < 0.4);
    let pass = run.attempts >= 200
        && run.rejected > 0
        && !exported.questions.is_empty()
        && result.em == 0.0
        && result.f1 < 40.0
        && all_below
        && replayed.snapshot_json() == run.live_snapshot;
    Outcome::check(
        pass,
        format!(
            "{} attempts ({} rejected), {} exported, EM {:.1} F1 {:.2}",
            run.attempts,
            run.rejected,
            exported.questions.len(),
            result.em,
            result.f1
        ),
    )
}

fn review_sampling() -> Outcome {
    let cases = [(1u64, 1u64), (10, 6), (100, 11), (1000, 16), (1_000_000, 31)];
    let got: Vec<u64> = cases.iter().map(|(n, _)| review_sample_size(*n)).collect();
    let want: Vec<u64> = cases.iter().map(|(_, k)| *k).collect();
    Outcome::check(got == want, format!("got {got:?}, want {want:?}"))
}

const QC_TEXT: &str = "The big red barn stood near New York City while green fields surrounded the old mill in 1850.";

fn qc_span(text: &str) -> Span {
    let start = QC_TEXT[..QC_TEXT.find(text).unwrap()].chars().count();
    Span::from_offsets(QC_TEXT, start, start + text.chars().count()).unwrap()
}

fn quality_control_replay() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("qc.ndjson");
    let mut registry = AdversaryRegistry::new();
    registry.insert(Arc::new(StubAdversary::new("stub").with_default("zzz")));
    let mut engine = Engine::new(EngineConfig::default(), registry)
        .with_clock(Arc::new(ManualClock::new(1_600_000_000_000, 1_000)))
        .with_sink(EventLogWriter::open(&log_path).unwrap());
    let pool = |prefix: &str| -> Vec<Passage> {
        (0..12)
            .map(|i| Passage {
                id: format!("{prefix}{i}"),
                title: format!("{prefix} title {}", i % 4),
                text: QC_TEXT.into(),
            })
            .collect()
    };
    engine.load_passages(Split::Train, pool("train-")).unwrap();
    engine.load_passages(Split::Dev, pool("dev-")).unwrap();
    for w in ["sloppy", "unclear", "careful"] {
        qualify(&mut engine, w);
    }
    let hit_with = |engine: &mut Engine, worker: &str, split: Split, n: usize| -> Vec<String> {
        let hit = engine.open_generation_hit(worker, "stub", PassageSelector::Split(split)).unwrap().id.clone();
        for i in 0..n {
            engine
                .submit_question(&hit, &format!("What did {worker} ask {i}?"), qc_span("big red barn"))
                .unwrap();
        }
        engine.complete_hit(&hit).unwrap();
        engine.generation_hit(&hit).unwrap().retained.clone()
    };

    // sloppy: 4 ok, 1 bad (exactly 0.8, kept), then another bad (4/6, revoked)
    let mut sloppy_hits = Vec::new();
    for _ in 0..6 {
        hit_with(&mut engine, "sloppy", Split::Train, 2);
        sloppy_hits.push(engine.state().hits.keys().last().unwrap().clone());
    }
    hit_with(&mut engine, "sloppy", Split::Dev, 2);
    for (i, h) in sloppy_hits.iter().enumerate() {
        let verdict = if i < 4 { ReviewVerdict::Ok } else { ReviewVerdict::Bad };
        engine.record_review("sloppy", h, verdict).unwrap();
    }
    let sloppy_revoked = engine.worker_profile("sloppy").unwrap().state == WorkerState::Revoked;

    // unclear: 10 dev questions, 4 answerable; careful: 4 dev questions, 3 answerable
    let mut unclear_q = hit_with(&mut engine, "unclear", Split::Dev, 5);
    unclear_q.extend(hit_with(&mut engine, "unclear", Split::Dev, 5));
    let careful_train = hit_with(&mut engine, "careful", Split::Train, 3);
    let careful_dev = hit_with(&mut engine, "careful", Split::Dev, 4);
    let validate = |engine: &mut Engine, q: &str, answerable: bool| {
        let first = if answerable { "red barn" } else { "old mill" };
        for (v, a) in ["v1", "v2", "v3"].iter().zip([first, "1850", "green fields"]) {
            engine.record_validation(q, v, qc_span(a)).unwrap();
        }
    };
    for (i, q) in unclear_q.iter().enumerate() {
        validate(&mut engine, q, i < 4);
    }
    for (i, q) in careful_dev.iter().enumerate() {
        validate(&mut engine, q, i != 2);
    }
    let report = engine.run_answerability(Split::Dev, &AdjudicationPolicy::default()).unwrap();
    engine.flush().unwrap();
    drop(engine);

    // everything below works from the log file alone
    let replayed = Engine::replay(EngineConfig::default(), AdversaryRegistry::new(), read_log(&log_path).unwrap()).unwrap();
    let bundle = export_dataset(
        replayed.state(),
        &ExportRequest {
            name: "qc".into(),
            splits: vec![Split::Train, Split::Dev],
            adversary_id: None,
        },
    )
    .unwrap();

    let discarded: BTreeSet<&str> = ["sloppy", "unclear"].into();
    let mut from_discarded = 0;
    let mut unanswerable = 0;
    let mut exported = BTreeSet::new();
    for (split, dataset) in &bundle.datasets {
        for qa in &dataset.questions {
            exported.insert(qa.id.clone());
            let record = &replayed.state().questions[&qa.id];
            if discarded.contains(record.worker_id.as_str()) {
                from_discarded += 1;
            }
            if *split != Split::Train && (record.answerable != Some(true) || record.status != QuestionStatus::Retained) {
                unanswerable += 1;
            }
            if qa.question != record.text || qa.answers != [record.gold.clone()] {
                from_discarded += 1;
            }
        }
    }
    let mut expected: BTreeSet<String> = careful_train.iter().cloned().collect();
    expected.extend(careful_dev.iter().enumerate().filter(|(i, _)| *i != 2).map(|(_, q)| q.clone()));
    let pass = sloppy_revoked
        && report.discarded_workers == ["unclear"]
        && from_discarded == 0
        && unanswerable == 0
        && exported == expected;
    Outcome::check(
        pass,
        format!(
            "{} exported questions scanned, {from_discarded} from discarded workers, {unanswerable} unanswerable dev questions, answerability rate {:.3}",
            exported.len(),
            report.answerability_rate
        ),
    )
}

fn squad_dev_path() -> Option<PathBuf> {
    std::env::var_os("ADVQA_SQUAD_DEV")
        .map(PathBuf::from)
        .or_else(|| Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/dev-v1.1.json")))
        .filter(|p| p.is_file())
}

fn statistics_reproduction() -> Outcome {
    let Some(path) = squad_dev_path() else {
        return Outcome::skip("SQuAD1.1 dev file not found (set ADVQA_SQUAD_DEV or add tests/data/dev-v1.1.json)");
    };
    let dataset = advqa_core::store::import_squad(&path).expect("SQuAD dev parses").consolidated();
    let (a, b) = split_stratified(&dataset, 0.5, 0);
    let stats = compute_stats(&dataset, None).unwrap();
    let mut counts = [a.questions.len() as i64, b.questions.len() as i64];
    counts.sort_unstable();
    let counts_ok = (counts[0] - 5278).abs() <= 300 && (counts[1] - 5292).abs() <= 300;
    let pass = (stats.mean_longest_ngram_overlap - 3.0).abs() <= 0.5
        && (stats.mean_question_words - 10.3).abs() <= 0.5
        && counts_ok;
    Outcome::check(
        pass,
        format!(
            "mean n-gram overlap {:.2}, mean question length {:.2}, split sizes {:?}",
            stats.mean_longest_ngram_overlap, stats.mean_question_words, counts
        ),
    )
}

fn generated_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let mut d = Dataset::default();
    let titles = rng.random_range(1..5);
    let mut qn = 0;
    for t in 0..titles {
        for p in 0..rng.random_range(1..4) {
            let len = rng.random_range(3..30);
            let (mut text, ext) = synthetic_passage(rng, len);
            if rng.random_bool(0.3) {
                text.push_str(" Café ☕ naïve.");
            }
            let id = format!("t{t}-p{p}");
            for _ in 0..rng.random_range(0..4) {
                let answers = (0..rng.random_range(1..4))
                    .map(|_| {
                        let s = rng.random_range(0..ext.len());
                        let e = rng.random_range(s..ext.len());
                        Span::from_offsets(&text, ext[s].0, ext[e].1).unwrap()
                    })
                    .collect();
                d.questions.push(QaRecord {
                    id: format!("gen-{qn}"),
                    passage_id: id.clone(),
                    question: format!("Which {}?", WORDS.choose(rng).unwrap()),
                    answers,
                });
                qn += 1;
            }
            d.passages.push(Passage {
                id,
                title: format!("Title \"{t}\""),
                text,
            });
        }
    }
    d
}

fn round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    let mut questions = 0;
    for _ in 0..200 {
        let d = generated_dataset(&mut rng);
        questions += d.questions.len();
        match parse_squad(&to_squad_json(&d)) {
            Ok(back) if back == d.canonical() && to_squad_json(&back) == to_squad_json(&d) => {}
            _ => mismatches += 1,
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let run = collection_run(dir.path());
    let snapshot = || {
        let records = read_log(&run.log_path).unwrap();
        Engine::replay(EngineConfig::default(), AdversaryRegistry::new(), records)
            .unwrap()
            .snapshot_json()
    };
    let (first, second) = (snapshot(), snapshot());
    let identical = first == second && first == run.live_snapshot;
    Outcome::check(
        mismatches == 0 && identical,
        format!(
            "200 generated datasets ({questions} questions), {mismatches} mismatches; replay snapshots {} ({} bytes)",
            if identical { "byte-identical" } else { "differ" },
            first.len()
        ),
    )
}
