//! Evaluation and dataset statistics.
//!
//! Everything here is a pure function over immutable data. Token-based
//! statistics (n-gram overlap) use the same normalization as the metrics
//! module; word counts use whitespace-separated words containing at least one
//! alphanumeric character.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineState};
use crate::metrics::{self, NormalizedTokens};
use crate::store::{Dataset, QuestionRecord, QuestionStatus, Split};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("missing predictions for {} question(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("no validations for {} question(s): {}", .0.len(), .0.join(", "))]
    NoValidations(Vec<String>),
    #[error("question {0} has no gold answer")]
    MissingGold(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("malformed predictions file: {0}")]
    MalformedPredictions(String),
}

/// Closed vocabulary of comprehension requirements. Labels are not mutually
/// exclusive; a question carries one to three of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComprehensionLabel {
    Explicit,
    Paraphrasing,
    ExternalKnowledge,
    CoReference,
    MultiHop,
    Comparative,
    Numeric,
    Negation,
    Filtering,
    Temporal,
    Spatial,
    Inductive,
    Implicit,
}

impl ComprehensionLabel {
    pub const ALL: [ComprehensionLabel; 13] = [
        ComprehensionLabel::Explicit,
        ComprehensionLabel::Paraphrasing,
        ComprehensionLabel::ExternalKnowledge,
        ComprehensionLabel::CoReference,
        ComprehensionLabel::MultiHop,
        ComprehensionLabel::Comparative,
        ComprehensionLabel::Numeric,
        ComprehensionLabel::Negation,
        ComprehensionLabel::Filtering,
        ComprehensionLabel::Temporal,
        ComprehensionLabel::Spatial,
        ComprehensionLabel::Inductive,
        ComprehensionLabel::Implicit,
    ];

    pub const MAX_PER_QUESTION: usize = 3;

    pub fn as_str(self) -> &'static str {
        match self {
            ComprehensionLabel::Explicit => "explicit",
            ComprehensionLabel::Paraphrasing => "paraphrasing",
            ComprehensionLabel::ExternalKnowledge => "external-knowledge",
            ComprehensionLabel::CoReference => "co-reference",
            ComprehensionLabel::MultiHop => "multi-hop",
            ComprehensionLabel::Comparative => "comparative",
            ComprehensionLabel::Numeric => "numeric",
            ComprehensionLabel::Negation => "negation",
            ComprehensionLabel::Filtering => "filtering",
            ComprehensionLabel::Temporal => "temporal",
            ComprehensionLabel::Spatial => "spatial",
            ComprehensionLabel::Inductive => "inductive",
            ComprehensionLabel::Implicit => "implicit",
        }
    }
}

impl fmt::Display for ComprehensionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("unknown comprehension label `{0}`")]
    UnknownLabel(String),
    #[error("{0} labels given, at most 3 allowed")]
    TooManyLabels(usize),
    #[error("at least one label is required")]
    NoLabels,
    #[error("label {0} given twice")]
    DuplicateLabel(ComprehensionLabel),
}

impl FromStr for ComprehensionLabel {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        ComprehensionLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == wanted)
            .ok_or_else(|| LabelError::UnknownLabel(s.to_owned()))
    }
}

pub fn check_labels(labels: &[ComprehensionLabel]) -> Result<(), LabelError> {
    if labels.is_empty() {
        return Err(LabelError::NoLabels);
    }
    if labels.len() > ComprehensionLabel::MAX_PER_QUESTION {
        return Err(LabelError::TooManyLabels(labels.len()));
    }
    let mut seen = BTreeSet::new();
    for l in labels {
        if !seen.insert(*l) {
            return Err(LabelError::DuplicateLabel(*l));
        }
    }
    Ok(())
}

pub fn parse_labels<S: AsRef<str>>(names: &[S]) -> Result<Vec<ComprehensionLabel>, LabelError> {
    let labels = names
        .iter()
        .map(|n| n.as_ref().parse())
        .collect::<Result<Vec<ComprehensionLabel>, _>>()?;
    check_labels(&labels)?;
    Ok(labels)
}

#[derive(Debug, Error)]
pub enum TagError {
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
}

/// Validates label names and stores them on a collected question.
pub fn tag_labels<S: AsRef<str>>(engine: &mut Engine, question_id: &str, names: &[S]) -> Result<QuestionRecord, TagError> {
    let labels = parse_labels(names)?;
    Ok(engine.tag_labels(question_id, labels)?.clone())
}

/// Share of labelled questions carrying each label. Labels are counted once
/// per question and are not exclusive, so shares need not sum to one.
pub fn label_distribution<'a, I>(questions: I) -> BTreeMap<ComprehensionLabel, f64>
where
    I: IntoIterator<Item = &'a [ComprehensionLabel]>,
{
    let mut counts: BTreeMap<ComprehensionLabel, usize> = BTreeMap::new();
    let mut labelled = 0usize;
    for labels in questions {
        if labels.is_empty() {
            continue;
        }
        labelled += 1;
        let unique: BTreeSet<_> = labels.iter().copied().collect();
        for l in unique {
            *counts.entry(l).or_default() += 1;
        }
    }
    ComprehensionLabel::ALL
        .into_iter()
        .map(|l| {
            let c = counts.get(&l).copied().unwrap_or(0);
            (l, if labelled == 0 { 0.0 } else { c as f64 / labelled as f64 })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub id: String,
    pub em: bool,
    pub f1: f64,
}

/// Aggregates are means of the per-question values, times 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub em: f64,
    pub f1: f64,
    pub per_question: Vec<QuestionScore>,
}

impl EvalResult {
    fn from_scores(per_question: Vec<QuestionScore>) -> Self {
        let n = per_question.len().max(1) as f64;
        Self {
            em: 100.0 * per_question.iter().filter(|q| q.em).count() as f64 / n,
            f1: 100.0 * per_question.iter().map(|q| q.f1).sum::<f64>() / n,
            per_question,
        }
    }

    /// One-decimal summary line.
    pub fn summary(&self) -> String {
        format!("EM {:.1} / F1 {:.1}", self.em, self.f1)
    }
}

/// Reads a `{question_id: answer}` JSON object.
pub fn parse_predictions(json: &str) -> Result<BTreeMap<String, String>, AnalysisError> {
    serde_json::from_str(json).map_err(|e| AnalysisError::MalformedPredictions(e.to_string()))
}

fn gold_text(q: &crate::store::QaRecord) -> Result<&str, AnalysisError> {
    q.gold()
        .map(|s| s.text.as_str())
        .ok_or_else(|| AnalysisError::MissingGold(q.id.clone()))
}

/// Scores predictions against each question's single gold answer.
pub fn evaluate<S: std::hash::BuildHasher>(
    dataset: &Dataset,
    predictions: &HashMap<String, String, S>,
) -> Result<EvalResult, AnalysisError> {
    let missing: Vec<String> = dataset
        .questions
        .iter()
        .filter(|q| !predictions.contains_key(&q.id))
        .map(|q| q.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(AnalysisError::MissingPredictions(missing));
    }
    let mut scores = Vec::with_capacity(dataset.questions.len());
    for q in &dataset.questions {
        let gold = metrics::normalize(gold_text(q)?);
        let pred = metrics::normalize(&predictions[&q.id]);
        scores.push(QuestionScore {
            id: q.id.clone(),
            em: gold == pred,
            f1: metrics::f1_tokens(&gold, &pred),
        });
    }
    Ok(EvalResult::from_scores(scores))
}

/// `evaluate` for an ordered prediction map.
pub fn evaluate_map(dataset: &Dataset, predictions: &BTreeMap<String, String>) -> Result<EvalResult, AnalysisError> {
    let map: HashMap<String, String> = predictions.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    evaluate(dataset, &map)
}

/// Non-expert human performance: for each question, in dataset order, one
/// validator answer is drawn with `gen_range(0..k)` from a ChaCha8 generator
/// seeded with `seed`, and scored against the original answer.
pub fn human_performance(
    dataset: &Dataset,
    validations: &BTreeMap<String, Vec<String>>,
    seed: u64,
) -> Result<EvalResult, AnalysisError> {
    let missing: Vec<String> = dataset
        .questions
        .iter()
        .filter(|q| validations.get(&q.id).is_none_or(Vec::is_empty))
        .map(|q| q.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(AnalysisError::NoValidations(missing));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(dataset.questions.len());
    for q in &dataset.questions {
        let answers = &validations[&q.id];
        let pick = &answers[rng.random_range(0..answers.len())];
        let gold = gold_text(q)?;
        scores.push(QuestionScore {
            id: q.id.clone(),
            em: metrics::em(gold, pick),
            f1: metrics::f1(gold, pick),
        });
    }
    Ok(EvalResult::from_scores(scores))
}

/// Validator answers per question for the given split's exportable questions.
pub fn validator_answers(state: &EngineState, split: Split) -> BTreeMap<String, Vec<String>> {
    state
        .questions
        .values()
        .filter(|q| q.split == split && q.status == QuestionStatus::Retained)
        .map(|q| {
            (
                q.id.clone(),
                q.validations.iter().map(|v| v.answer_span.text.clone()).collect(),
            )
        })
        .collect()
}

/// Length of the longest contiguous token run shared by both sequences.
pub fn longest_common_run(passage: &[String], question: &[String]) -> usize {
    let mut prev = vec![0usize; question.len() + 1];
    let mut cur = vec![0usize; question.len() + 1];
    let mut best = 0;
    for p in passage {
        for (j, q) in question.iter().enumerate() {
            cur[j + 1] = if p == q { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Largest n such that some n-gram of the normalized question appears in the
/// normalized passage.
pub fn longest_ngram_overlap(passage: &str, question: &str) -> usize {
    longest_common_run(metrics::normalize(passage).as_slice(), metrics::normalize(question).as_slice())
}

/// Words containing at least one letter or digit.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .count()
}

pub const WH_WORDS: [&str; 9] = ["what", "which", "who", "whose", "whom", "where", "when", "why", "how"];
pub const WH_CATEGORIES: [&str; 11] = [
    "what", "which", "who", "whose", "whom", "where", "when", "why", "how", "in", "other",
];

/// Question type: `in` when the question opens with "in", otherwise the
/// leftmost wh-word, otherwise `other`.
pub fn wh_word(question: &str) -> &'static str {
    let lowered = metrics::strip_punctuation_lower(question);
    let mut tokens = lowered.split_whitespace().peekable();
    if tokens.peek() == Some(&"in") {
        return "in";
    }
    for t in tokens {
        if let Some(w) = WH_WORDS.iter().find(|w| **w == t) {
            return w;
        }
    }
    "other"
}

pub const ANSWER_TYPES: [&str; 6] = ["date", "numeric", "proper_noun", "verb_phrase", "common_noun_phrase", "other"];

fn date_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(jan(uary)?|feb(ruary)?|mar(ch)?|apr(il)?|may|june?|july?|aug(ust)?|sep(t(ember)?)?|oct(ober)?|nov(ember)?|dec(ember)?)\b|\b(1[0-9]{3}|20[0-9]{2})s?\b|\b[0-9]{1,2}(st|nd|rd|th) century\b",
        )
        .expect("valid date pattern")
    })
}

const NUMBER_WORDS: [&str; 32] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fifteen", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety", "hundred",
    "hundreds", "thousand", "thousands", "million", "millions", "billion", "dozen", "half",
];

const FUNCTION_WORDS: [&str; 12] = ["of", "the", "and", "de", "von", "van", "a", "an", "for", "in", "on", "la"];

const VERB_CUES: [&str; 12] = ["is", "are", "was", "were", "be", "been", "to", "has", "have", "had", "do", "did"];

/// Rule-based answer typing; an approximation with an explicit `other` bucket.
///
/// Rules in order: a month name, year or century → `date`; a leading number or
/// number word → `numeric`; every content word capitalized → `proper_noun`;
/// a lowercase phrase opening with an auxiliary or an -ing/-ed word →
/// `verb_phrase`; any other lowercase alphabetic phrase →
/// `common_noun_phrase`; anything else → `other`.
pub fn answer_type(answer: &str) -> &'static str {
    let words: Vec<String> = answer
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '%' && c != '$').to_owned())
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return "other";
    }
    if date_pattern().is_match(answer) {
        return "date";
    }
    let first = words[0].to_lowercase();
    if first.chars().any(|c| c.is_ascii_digit()) || NUMBER_WORDS.contains(&first.as_str()) {
        return "numeric";
    }
    let content: Vec<&String> = words
        .iter()
        .filter(|w| !FUNCTION_WORDS.contains(&w.to_lowercase().as_str()))
        .collect();
    if !content.is_empty() && content.iter().all(|w| w.chars().next().is_some_and(char::is_uppercase)) {
        return "proper_noun";
    }
    let lowercase_alpha = words
        .iter()
        .all(|w| w.chars().all(|c| c.is_alphabetic() || c == '-' || c == '\'') && !w.chars().next().is_some_and(char::is_uppercase));
    if lowercase_alpha {
        if VERB_CUES.contains(&first.as_str()) || (first.len() > 4 && (first.ends_with("ing") || first.ends_with("ed"))) {
            return "verb_phrase";
        }
        return "common_noun_phrase";
    }
    "other"
}

/// Counts of the first three question tokens, as nested rings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefixNode {
    pub count: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub children: BTreeMap<String, PrefixNode>,
}

impl PrefixNode {
    fn insert(&mut self, tokens: &[&str]) {
        self.count += 1;
        if let Some((head, rest)) = tokens.split_first() {
            self.children.entry((*head).to_owned()).or_default().insert(rest);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub questions: usize,
    pub passages: usize,
    pub mean_question_words: f64,
    pub mean_answer_words: f64,
    pub mean_longest_ngram_overlap: f64,
    pub std_longest_ngram_overlap: f64,
    pub ngram_overlap_histogram: BTreeMap<usize, usize>,
    pub question_length_histogram: BTreeMap<usize, usize>,
    pub answer_length_histogram: BTreeMap<usize, usize>,
    pub wh_distribution: BTreeMap<String, f64>,
    pub answer_type_distribution: BTreeMap<String, f64>,
    pub question_prefix_tree: PrefixNode,
    pub label_distribution: BTreeMap<ComprehensionLabel, f64>,
}

fn distribution(keys: &[&str], counts: &BTreeMap<&str, usize>, total: usize) -> BTreeMap<String, f64> {
    keys.iter()
        .map(|k| {
            (
                (*k).to_owned(),
                counts.get(k).copied().unwrap_or(0) as f64 / total as f64,
            )
        })
        .collect()
}

/// Length, overlap, question-type and answer-type statistics of a dataset.
/// Label shares come from `labels` when given (keyed by question id).
pub fn compute_stats(
    dataset: &Dataset,
    labels: Option<&BTreeMap<String, Vec<ComprehensionLabel>>>,
) -> Result<StatsReport, AnalysisError> {
    if dataset.questions.is_empty() {
        return Err(AnalysisError::EmptyDataset);
    }
    let passages = dataset.passage_index();
    let mut passage_tokens: HashMap<&str, NormalizedTokens> = HashMap::new();
    let n = dataset.questions.len();
    let mut q_words = 0usize;
    let mut a_words = 0usize;
    let mut overlaps = Vec::with_capacity(n);
    let mut ngram_hist = BTreeMap::new();
    let mut q_hist = BTreeMap::new();
    let mut a_hist = BTreeMap::new();
    let mut wh: BTreeMap<&str, usize> = BTreeMap::new();
    let mut types: BTreeMap<&str, usize> = BTreeMap::new();
    let mut prefixes = PrefixNode::default();

    for q in &dataset.questions {
        let gold = gold_text(q)?;
        let qw = word_count(&q.question);
        let aw = word_count(gold);
        q_words += qw;
        a_words += aw;
        *q_hist.entry(qw).or_default() += 1;
        *a_hist.entry(aw).or_default() += 1;

        let ptoks = passage_tokens.entry(q.passage_id.as_str()).or_insert_with(|| {
            passages
                .get(q.passage_id.as_str())
                .map(|p| metrics::normalize(&p.text))
                .unwrap_or_default()
        });
        let overlap = longest_common_run(ptoks.as_slice(), metrics::normalize(&q.question).as_slice());
        overlaps.push(overlap as f64);
        *ngram_hist.entry(overlap).or_default() += 1;

        *wh.entry(wh_word(&q.question)).or_default() += 1;
        *types.entry(answer_type(gold)).or_default() += 1;

        let lowered = metrics::strip_punctuation_lower(&q.question);
        let head: Vec<&str> = lowered.split_whitespace().take(3).collect();
        prefixes.insert(&head);
    }

    let mean_overlap = overlaps.iter().sum::<f64>() / n as f64;
    let var = overlaps.iter().map(|o| (o - mean_overlap).powi(2)).sum::<f64>() / n as f64;
    let label_distribution = match labels {
        Some(map) => label_distribution(
            dataset
                .questions
                .iter()
                .filter_map(|q| map.get(&q.id).map(Vec::as_slice)),
        ),
        None => label_distribution(std::iter::empty()),
    };
    Ok(StatsReport {
        questions: n,
        passages: dataset.passages.len(),
        mean_question_words: q_words as f64 / n as f64,
        mean_answer_words: a_words as f64 / n as f64,
        mean_longest_ngram_overlap: mean_overlap,
        std_longest_ngram_overlap: var.sqrt(),
        ngram_overlap_histogram: ngram_hist,
        question_length_histogram: q_hist,
        answer_length_histogram: a_hist,
        wh_distribution: distribution(&WH_CATEGORIES, &wh, n),
        answer_type_distribution: distribution(&ANSWER_TYPES, &types, n),
        question_prefix_tree: prefixes,
        label_distribution,
    })
}

/// Flattens a report into `section,key,value` CSV rows.
pub fn stats_csv(report: &StatsReport) -> String {
    let mut rows = vec![
        "section,key,value".to_owned(),
        format!("summary,questions,{}", report.questions),
        format!("summary,passages,{}", report.passages),
        format!("summary,mean_question_words,{}", report.mean_question_words),
        format!("summary,mean_answer_words,{}", report.mean_answer_words),
        format!("summary,mean_longest_ngram_overlap,{}", report.mean_longest_ngram_overlap),
        format!("summary,std_longest_ngram_overlap,{}", report.std_longest_ngram_overlap),
    ];
    for (k, v) in &report.ngram_overlap_histogram {
        rows.push(format!("ngram_overlap_histogram,{k},{v}"));
    }
    for (k, v) in &report.question_length_histogram {
        rows.push(format!("question_length_histogram,{k},{v}"));
    }
    for (k, v) in &report.answer_length_histogram {
        rows.push(format!("answer_length_histogram,{k},{v}"));
    }
    for (k, v) in &report.wh_distribution {
        rows.push(format!("wh_distribution,{k},{v}"));
    }
    for (k, v) in &report.answer_type_distribution {
        rows.push(format!("answer_type_distribution,{k},{v}"));
    }
    for (k, v) in &report.label_distribution {
        rows.push(format!("label_distribution,{k},{v}"));
    }
    let mut out = rows.join("\n");
    out.push('\n');
    out
}
