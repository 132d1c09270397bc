//! Answer normalization, exact match, word-overlap F1 and the model-win rule.
//!
//! Normalization follows the SQuAD v1.1 evaluator: lowercase, delete
//! punctuation characters, replace the articles `a`, `an`, `the` with a
//! space, then split on whitespace. "Punctuation" is the union of ASCII
//! punctuation (the evaluator's `string.punctuation`) and every Unicode
//! `P*` general category.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default F1 at or above which the model's answer counts as correct.
pub const DEFAULT_WIN_THRESHOLD: f64 = 0.4;
/// Default F1 at or above which a validator's answer matches the original.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.4;

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{P}!-/:-@\[-`{-~]").expect("valid punctuation class"))
}

fn articles() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("valid article pattern"))
}

/// Whitespace as understood by Python's `str.split()`.
fn is_split_char(c: char) -> bool {
    c.is_whitespace() || ('\u{1c}'..='\u{1f}').contains(&c)
}

/// Lowercased, punctuation-free, article-free tokens of an answer string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizedTokens(Vec<String>);

impl NormalizedTokens {
    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }

    /// Tokens joined by single spaces; feeding this back into [`normalize`]
    /// yields the same tokens.
    pub fn joined(&self) -> String {
        self.0.join(" ")
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }
}

impl<'a> IntoIterator for &'a NormalizedTokens {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Lowercases and strips punctuation without removing articles.
///
/// Used where articles must be kept (question prefixes, adversary windows).
pub fn strip_punctuation_lower(text: &str) -> String {
    punctuation().replace_all(&text.to_lowercase(), "").into_owned()
}

pub fn normalize(text: &str) -> NormalizedTokens {
    let stripped = strip_punctuation_lower(text);
    let without_articles = articles().replace_all(&stripped, " ");
    NormalizedTokens(
        without_articles
            .split(is_split_char)
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect(),
    )
}

/// Multiset intersection size of two token sequences.
pub fn overlap_count(a: &[String], b: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::with_capacity(a.len());
    for t in a {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut same = 0;
    for t in b {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    same
}

/// F1 over already-normalized tokens.
///
/// `2PR / (P + R)` reduces to `2·overlap / (|gold| + |pred|)`; evaluating the
/// reduced form gives a correctly rounded result, so rational boundaries such
/// as 2/5 compare exactly against the same literal threshold.
pub fn f1_tokens(gold: &NormalizedTokens, pred: &NormalizedTokens) -> f64 {
    if gold.is_empty() && pred.is_empty() {
        return 1.0;
    }
    let same = overlap_count(gold.as_slice(), pred.as_slice());
    if same == 0 {
        return 0.0;
    }
    (2 * same) as f64 / (gold.len() + pred.len()) as f64
}

pub fn f1(gold: &str, pred: &str) -> f64 {
    f1_tokens(&normalize(gold), &normalize(pred))
}

pub fn em(gold: &str, pred: &str) -> bool {
    normalize(gold) == normalize(pred)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("{name} must be within [0, 1], got {value}")]
    ThresholdOutOfRange { name: &'static str, value: f64 },
}

/// Thresholds governing model wins and validator matches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationPolicy {
    #[serde(default = "default_win")]
    pub win_threshold: f64,
    #[serde(default = "default_match")]
    pub match_threshold: f64,
}

fn default_win() -> f64 {
    DEFAULT_WIN_THRESHOLD
}

fn default_match() -> f64 {
    DEFAULT_MATCH_THRESHOLD
}

impl Default for AdjudicationPolicy {
    fn default() -> Self {
        Self {
            win_threshold: DEFAULT_WIN_THRESHOLD,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
        }
    }
}

impl AdjudicationPolicy {
    pub fn new(win_threshold: f64, match_threshold: f64) -> Result<Self, PolicyError> {
        let policy = Self {
            win_threshold,
            match_threshold,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        for (name, value) in [
            ("win_threshold", self.win_threshold),
            ("match_threshold", self.match_threshold),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(PolicyError::ThresholdOutOfRange { name, value });
            }
        }
        Ok(())
    }

    /// Whether a validator answer matches the original answer.
    pub fn matches(&self, original: &str, candidate: &str) -> bool {
        f1(original, candidate) >= self.match_threshold
    }
}

/// Outcome of comparing a human answer with the model's answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub em: bool,
    pub f1: f64,
    pub model_win: bool,
}

impl MatchScore {
    /// The question survives the filter only when the model lost.
    pub fn human_win(&self) -> bool {
        !self.model_win
    }
}

/// Scores the model answer against the human answer. The model wins when
/// F1 reaches the policy's win threshold (inclusive).
pub fn adjudicate(human_answer: &str, model_answer: &str, policy: &AdjudicationPolicy) -> MatchScore {
    let gold = normalize(human_answer);
    let pred = normalize(model_answer);
    let f1 = f1_tokens(&gold, &pred);
    MatchScore {
        em: gold == pred,
        f1,
        model_win: f1 >= policy.win_threshold,
    }
}
