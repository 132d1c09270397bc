//! The model in the loop.
//!
//! Three kinds of adversary are available: a configurable stub for tests and
//! scripted sessions, an in-process lexical sliding-window baseline, and an
//! HTTP client for out-of-process QA models.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::metrics::{self, NormalizedTokens};
use crate::store::{char_len, char_slice, Passage};

pub const DEFAULT_MAX_SPAN_TOKENS: usize = 10;
pub const DEFAULT_CONTEXT_WINDOW: usize = 3;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_RETRIES: usize = 2;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversaryError {
    #[error("invalid adversary input: {0}")]
    InvalidInput(String),
    #[error("remote adversary {endpoint} unavailable: {reason}")]
    RemoteUnavailable { endpoint: String, reason: String },
    #[error("malformed adversary response: {0}")]
    MalformedResponse(String),
    #[error("adversary misconfigured: {0}")]
    Misconfigured(String),
}

impl AdversaryError {
    /// Only transport failures are worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, AdversaryError::RemoteUnavailable { .. })
    }
}

/// The model's answer to a question about a passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
    pub latency_ms: u64,
    pub adversary_id: String,
    /// False when `text` is free text not located in the passage (stubs only);
    /// the offsets are then meaningless.
    #[serde(default = "yes")]
    pub grounded: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    Stub,
    LexicalWindow,
    Remote,
}

impl fmt::Display for AdversaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdversaryKind::Stub => "stub",
            AdversaryKind::LexicalWindow => "lexical_window",
            AdversaryKind::Remote => "remote",
        })
    }
}

/// Registry entry describing how to build an adversary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryDescriptor {
    pub id: String,
    pub kind: AdversaryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub config: BTreeMap<String, Value>,
}

impl AdversaryDescriptor {
    pub fn new(id: impl Into<String>, kind: AdversaryKind) -> Self {
        Self {
            id: id.into(),
            kind,
            endpoint: None,
            config: BTreeMap::new(),
        }
    }

    pub fn with_config(mut self, key: &str, value: Value) -> Self {
        self.config.insert(key.to_owned(), value);
        self
    }

    pub fn validate(&self) -> Result<(), AdversaryError> {
        if self.id.is_empty() {
            return Err(AdversaryError::Misconfigured("adversary id is empty".into()));
        }
        if self.kind == AdversaryKind::Remote && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(AdversaryError::Misconfigured(format!(
                "remote adversary {} has no endpoint",
                self.id
            )));
        }
        Ok(())
    }

    fn usize_option(&self, key: &str, default: usize) -> Result<usize, AdversaryError> {
        match self.config.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| AdversaryError::Misconfigured(format!("{}: `{key}` must be a non-negative integer", self.id))),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Adversary>, AdversaryError> {
        self.validate()?;
        Ok(match self.kind {
            AdversaryKind::Stub => Arc::new(StubAdversary::from_descriptor(self)?),
            AdversaryKind::LexicalWindow => Arc::new(LexicalWindow::new(
                &self.id,
                self.usize_option("max_span_tokens", DEFAULT_MAX_SPAN_TOKENS)?.max(1),
                self.usize_option("context_window", DEFAULT_CONTEXT_WINDOW)?,
            )),
            AdversaryKind::Remote => Arc::new(RemoteAdversary::new(
                &self.id,
                self.endpoint.as_deref().unwrap_or_default(),
                Duration::from_millis(self.usize_option("timeout_ms", DEFAULT_TIMEOUT.as_millis() as usize)? as u64),
                self.usize_option("retries", DEFAULT_RETRIES)?,
                self.usize_option("max_in_flight", DEFAULT_MAX_IN_FLIGHT)?.max(1),
            )),
        })
    }
}

pub trait Adversary: Send + Sync {
    fn id(&self) -> &str;

    fn kind(&self) -> AdversaryKind;

    /// Answers `question` about `passage`.
    fn predict(&self, passage: &Passage, question: &str) -> Result<Prediction, AdversaryError>;
}

fn check_inputs(passage: &Passage, question: &str) -> Result<(), AdversaryError> {
    if passage.text.is_empty() {
        return Err(AdversaryError::InvalidInput(format!("passage {} is empty", passage.id)));
    }
    if question.trim().is_empty() {
        return Err(AdversaryError::InvalidInput("question is empty".into()));
    }
    Ok(())
}

/// Convenience wrapper that validates inputs before delegating.
pub fn predict(adversary: &dyn Adversary, passage: &Passage, question: &str) -> Result<Prediction, AdversaryError> {
    check_inputs(passage, question)?;
    adversary.predict(passage, question)
}

/// Returns configured answers.
///
/// Lookup order: the `answers` map keyed by exact question text, then the
/// `sequence` list (one entry per call, the last entry repeating), then
/// `default`, then the empty string. Answers found in the passage get real
/// offsets; anything else is flagged as ungrounded free text.
pub struct StubAdversary {
    id: String,
    answers: BTreeMap<String, String>,
    sequence: Vec<String>,
    default: Option<String>,
    calls: AtomicUsize,
}

impl StubAdversary {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.to_owned(),
            answers: BTreeMap::new(),
            sequence: Vec::new(),
            default: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_answer(mut self, question: &str, answer: &str) -> Self {
        self.answers.insert(question.to_owned(), answer.to_owned());
        self
    }

    pub fn with_sequence<I: IntoIterator<Item = S>, S: Into<String>>(mut self, answers: I) -> Self {
        self.sequence = answers.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_default(mut self, answer: &str) -> Self {
        self.default = Some(answer.to_owned());
        self
    }

    fn from_descriptor(d: &AdversaryDescriptor) -> Result<Self, AdversaryError> {
        let bad = |key: &str| AdversaryError::Misconfigured(format!("{}: malformed stub `{key}`", d.id));
        let mut stub = StubAdversary::new(&d.id);
        if let Some(v) = d.config.get("answers") {
            let map = v.as_object().ok_or_else(|| bad("answers"))?;
            for (q, a) in map {
                stub.answers.insert(q.clone(), a.as_str().ok_or_else(|| bad("answers"))?.to_owned());
            }
        }
        if let Some(v) = d.config.get("sequence") {
            let list = v.as_array().ok_or_else(|| bad("sequence"))?;
            for a in list {
                stub.sequence.push(a.as_str().ok_or_else(|| bad("sequence"))?.to_owned());
            }
        }
        if let Some(v) = d.config.get("default") {
            stub.default = Some(v.as_str().ok_or_else(|| bad("default"))?.to_owned());
        }
        Ok(stub)
    }
}

impl Adversary for StubAdversary {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> AdversaryKind {
        AdversaryKind::Stub
    }

    fn predict(&self, passage: &Passage, question: &str) -> Result<Prediction, AdversaryError> {
        let started = Instant::now();
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let text = self
            .answers
            .get(question)
            .cloned()
            .or_else(|| self.sequence.get(call.min(self.sequence.len().saturating_sub(1))).cloned())
            .or_else(|| self.default.clone())
            .unwrap_or_default();
        let located = if text.is_empty() {
            None
        } else {
            passage.text.find(&text).map(|byte| {
                let start = char_len(&passage.text[..byte]);
                (start, start + char_len(&text))
            })
        };
        let (char_start, char_end, grounded) = match located {
            Some((s, e)) => (s, e, true),
            None => (0, 0, text.is_empty()),
        };
        Ok(Prediction {
            text,
            char_start,
            char_end,
            latency_ms: started.elapsed().as_millis() as u64,
            adversary_id: self.id.clone(),
            grounded,
        })
    }
}

/// A passage word with its normalized form and code-point extent, leading and
/// trailing punctuation excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassageToken {
    pub norm: String,
    pub char_start: usize,
    pub char_end: usize,
}

/// Splits a passage into whitespace-delimited words. Words that are pure
/// punctuation are skipped; articles are kept so that spans may contain them.
pub fn tokenize_passage(text: &str) -> Vec<PassageToken> {
    let chars: Vec<char> = text.chars().collect();
    let is_punct = |c: char| metrics::strip_punctuation_lower(c.encode_utf8(&mut [0; 4])).is_empty();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let mut s = start;
        let mut e = i;
        while s < e && is_punct(chars[s]) {
            s += 1;
        }
        while e > s && is_punct(chars[e - 1]) {
            e -= 1;
        }
        if s == e {
            continue;
        }
        let word: String = chars[s..e].iter().collect();
        let norm = metrics::strip_punctuation_lower(&word);
        if !norm.is_empty() {
            tokens.push(PassageToken {
                norm,
                char_start: s,
                char_end: e,
            });
        }
    }
    tokens
}

/// Score of a candidate span as an exact fraction `overlap / (1 + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowScore {
    pub overlap: usize,
    pub span_len: usize,
}

impl WindowScore {
    pub fn value(&self) -> f64 {
        self.overlap as f64 / (1 + self.span_len) as f64
    }

    /// Strict comparison by cross-multiplication.
    pub fn beats(&self, other: &WindowScore) -> bool {
        self.overlap * (1 + other.span_len) > other.overlap * (1 + self.span_len)
    }
}

/// Counts distinct question tokens present in `span` widened by `context`
/// tokens on each side, over `1 + span length`.
pub fn window_score(
    passage_tokens: &[String],
    span: Range<usize>,
    question_tokens: &NormalizedTokens,
    context: usize,
) -> WindowScore {
    let lo = span.start.saturating_sub(context);
    let hi = (span.end + context).min(passage_tokens.len());
    let window: HashSet<&str> = passage_tokens[lo..hi].iter().map(String::as_str).collect();
    let wanted: HashSet<&str> = question_tokens.iter().map(String::as_str).collect();
    WindowScore {
        overlap: wanted.intersection(&window).count(),
        span_len: span.len(),
    }
}

pub fn score_window(
    passage_tokens: &[String],
    span: Range<usize>,
    question_tokens: &NormalizedTokens,
    context: usize,
) -> f64 {
    window_score(passage_tokens, span, question_tokens, context).value()
}

/// Dependency-free sliding-window baseline.
///
/// Every span of up to `max_span_tokens` tokens is scored with
/// [`window_score`]; the best wins, ties going to the earliest start and then
/// the shortest span.
pub struct LexicalWindow {
    id: String,
    max_span_tokens: usize,
    context_window: usize,
}

impl LexicalWindow {
    pub fn new(id: &str, max_span_tokens: usize, context_window: usize) -> Self {
        Self {
            id: id.to_owned(),
            max_span_tokens,
            context_window,
        }
    }

    /// Best token range and its score, or `None` for a passage without words.
    pub fn best_span(&self, passage_tokens: &[String], question_tokens: &NormalizedTokens) -> Option<(Range<usize>, WindowScore)> {
        let mut best: Option<(Range<usize>, WindowScore)> = None;
        for start in 0..passage_tokens.len() {
            let longest = self.max_span_tokens.min(passage_tokens.len() - start);
            for len in 1..=longest {
                let span = start..start + len;
                let score = window_score(passage_tokens, span.clone(), question_tokens, self.context_window);
                if best.as_ref().is_none_or(|(_, b)| score.beats(b)) {
                    best = Some((span, score));
                }
            }
        }
        best
    }
}

impl Adversary for LexicalWindow {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> AdversaryKind {
        AdversaryKind::LexicalWindow
    }

    fn predict(&self, passage: &Passage, question: &str) -> Result<Prediction, AdversaryError> {
        let started = Instant::now();
        let tokens = tokenize_passage(&passage.text);
        let norms: Vec<String> = tokens.iter().map(|t| t.norm.clone()).collect();
        let question_tokens = metrics::normalize(question);
        let (char_start, char_end) = match self.best_span(&norms, &question_tokens) {
            Some((span, _)) => (tokens[span.start].char_start, tokens[span.end - 1].char_end),
            None => (0, 0),
        };
        let text = char_slice(&passage.text, char_start, char_end)
            .unwrap_or_default()
            .to_owned();
        Ok(Prediction {
            text,
            char_start,
            char_end,
            latency_ms: started.elapsed().as_millis() as u64,
            adversary_id: self.id.clone(),
            grounded: true,
        })
    }
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    passage: &'a str,
    question: &'a str,
}

#[derive(Debug, Deserialize)]
struct RemoteResponse {
    answer: String,
    char_start: usize,
    char_end: usize,
}

/// Decodes a remote model response and checks it against the passage.
///
/// Returns `(answer, char_start, char_end)`.
pub fn parse_remote_response(body: &str, passage_text: &str) -> Result<(String, usize, usize), AdversaryError> {
    let r: RemoteResponse =
        serde_json::from_str(body).map_err(|e| AdversaryError::MalformedResponse(e.to_string()))?;
    if r.char_start > r.char_end {
        return Err(AdversaryError::MalformedResponse(format!(
            "char_start {} exceeds char_end {}",
            r.char_start, r.char_end
        )));
    }
    match char_slice(passage_text, r.char_start, r.char_end) {
        Some(found) if found == r.answer => Ok((r.answer, r.char_start, r.char_end)),
        Some(found) => Err(AdversaryError::MalformedResponse(format!(
            "answer {:?} does not match passage text {:?} at [{}, {})",
            r.answer, found, r.char_start, r.char_end
        ))),
        None => Err(AdversaryError::MalformedResponse(format!(
            "offsets [{}, {}) exceed the passage",
            r.char_start, r.char_end
        ))),
    }
}

/// Counting semaphore limiting concurrent requests.
struct InFlight {
    limit: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Client for a QA model served over HTTP.
///
/// Sends `POST {endpoint}/predict` with `{"passage", "question"}` and expects
/// `{"answer", "char_start", "char_end"}` back. Transport failures and 5xx
/// responses are retried; malformed responses are not.
pub struct RemoteAdversary {
    id: String,
    url: String,
    agent: ureq::Agent,
    retries: usize,
    in_flight: InFlight,
}

impl RemoteAdversary {
    pub fn new(id: &str, endpoint: &str, timeout: Duration, retries: usize, max_in_flight: usize) -> Self {
        let trimmed = endpoint.trim_end_matches('/');
        let url = if trimmed.ends_with("/predict") {
            trimmed.to_owned()
        } else {
            format!("{trimmed}/predict")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            id: id.to_owned(),
            url,
            agent,
            retries,
            in_flight: InFlight {
                limit: max_in_flight,
                current: Mutex::new(0),
                freed: Condvar::new(),
            },
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn attempt(&self, body: &str) -> Result<String, AdversaryError> {
        let unavailable = |reason: String| AdversaryError::RemoteUnavailable {
            endpoint: self.url.clone(),
            reason,
        };
        let mut response = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| unavailable(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| unavailable(e.to_string()))?;
        match status {
            200..=299 => Ok(text),
            500..=599 => Err(unavailable(format!("HTTP {status}"))),
            _ => Err(AdversaryError::MalformedResponse(format!("HTTP {status}: {text}"))),
        }
    }
}

impl Adversary for RemoteAdversary {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> AdversaryKind {
        AdversaryKind::Remote
    }

    fn predict(&self, passage: &Passage, question: &str) -> Result<Prediction, AdversaryError> {
        let body = serde_json::to_string(&RemoteRequest {
            passage: &passage.text,
            question,
        })
        .map_err(|e| AdversaryError::InvalidInput(e.to_string()))?;
        let _permit = self.in_flight.acquire();
        let started = Instant::now();
        let mut last = None;
        for attempt in 0..=self.retries {
            match self.attempt(&body) {
                Ok(text) => {
                    let (answer, char_start, char_end) = parse_remote_response(&text, &passage.text)?;
                    return Ok(Prediction {
                        text: answer,
                        char_start,
                        char_end,
                        latency_ms: started.elapsed().as_millis() as u64,
                        adversary_id: self.id.clone(),
                        grounded: true,
                    });
                }
                Err(e) if e.is_retryable() => {
                    log::warn!("adversary {} attempt {} failed: {e}", self.id, attempt + 1);
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or_else(|| AdversaryError::RemoteUnavailable {
            endpoint: self.url.clone(),
            reason: "no attempt made".into(),
        }))
    }
}

/// Built adversaries keyed by id.
#[derive(Clone, Default)]
pub struct AdversaryRegistry {
    adversaries: BTreeMap<String, Arc<dyn Adversary>>,
}

impl fmt::Debug for AdversaryRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.adversaries.keys()).finish()
    }
}

impl AdversaryRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_descriptors(descriptors: &[AdversaryDescriptor]) -> Result<Self, AdversaryError> {
        let mut registry = Self::new();
        for d in descriptors {
            if registry.adversaries.contains_key(&d.id) {
                return Err(AdversaryError::Misconfigured(format!("duplicate adversary id {}", d.id)));
            }
            registry.insert(d.build()?);
        }
        Ok(registry)
    }

    pub fn insert(&mut self, adversary: Arc<dyn Adversary>) {
        self.adversaries.insert(adversary.id().to_owned(), adversary);
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn Adversary>> {
        self.adversaries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.adversaries.contains_key(id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.adversaries.keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.adversaries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    fn passage(text: &str) -> Passage {
        Passage {
            id: "p".into(),
            title: "T".into(),
            text: text.into(),
        }
    }

    #[test]
    fn stub_echoes_configuration() {
        let stub = StubAdversary::new("stub").with_answer("q", "the market");
        let p = stub.predict(&passage("we went to the market today"), "q").unwrap();
        assert_eq!(p.text, "the market");
        assert_eq!((p.char_start, p.char_end), (11, 21));
        assert!(p.grounded);

        let free = StubAdversary::new("stub").with_default("nowhere");
        let p = free.predict(&passage("abc"), "q").unwrap();
        assert_eq!(p.text, "nowhere");
        assert!(!p.grounded);
    }

    #[test]
    fn stub_sequence_repeats_last() {
        let stub = StubAdversary::new("s").with_sequence(["one", "two"]);
        let p = passage("one two three");
        let got: Vec<String> = (0..4).map(|_| stub.predict(&p, "q").unwrap().text).collect();
        assert_eq!(got, ["one", "two", "two", "two"]);
    }

    #[test]
    fn stub_from_descriptor() {
        let d = AdversaryDescriptor::new("s", AdversaryKind::Stub)
            .with_config("answers", serde_json::json!({"who?": "Sting"}))
            .with_config("default", serde_json::json!("x"));
        let a = d.build().unwrap();
        assert_eq!(a.predict(&passage("and Sting sang"), "who?").unwrap().text, "Sting");
        let bad = AdversaryDescriptor::new("s", AdversaryKind::Stub).with_config("sequence", serde_json::json!(3));
        assert!(bad.build().is_err());
    }

    #[test]
    fn remote_requires_endpoint() {
        let d = AdversaryDescriptor::new("r", AdversaryKind::Remote);
        assert!(matches!(d.validate(), Err(AdversaryError::Misconfigured(_))));
    }

    #[test]
    fn predict_rejects_empty_inputs() {
        let a = LexicalWindow::new("lw", 3, 2);
        assert!(matches!(predict(&a, &passage(""), "q"), Err(AdversaryError::InvalidInput(_))));
        assert!(matches!(predict(&a, &passage("text"), "  "), Err(AdversaryError::InvalidInput(_))));
    }

    #[test]
    fn tokenizer_tracks_offsets() {
        let text = "“Hello,” said the café-owner... — ok";
        let toks = tokenize_passage(text);
        let words: Vec<&str> = toks
            .iter()
            .map(|t| char_slice(text, t.char_start, t.char_end).unwrap())
            .collect();
        assert_eq!(words, ["Hello", "said", "the", "café-owner", "ok"]);
        assert_eq!(toks[3].norm, "caféowner");
    }

    /// Exact-rational brute force over all spans, written independently of
    /// `best_span`'s iteration order.
    fn brute_best(tokens: &[String], q: &NormalizedTokens, max_len: usize, w: usize) -> (usize, usize, usize) {
        let qset: HashSet<&String> = q.iter().collect();
        let mut all = Vec::new();
        for s in 0..tokens.len() {
            for e in s + 1..=tokens.len().min(s + max_len) {
                let lo = s.saturating_sub(w);
                let hi = (e + w).min(tokens.len());
                let found: HashSet<&String> = tokens[lo..hi].iter().filter(|t| qset.contains(t)).collect();
                all.push((found.len(), e - s, s));
            }
        }
        // maximize overlap/(1+len); tie: smallest start, then smallest len
        all.sort_by(|a, b| {
            let lhs = b.0 * (1 + a.1);
            let rhs = a.0 * (1 + b.1);
            lhs.cmp(&rhs).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1))
        });
        let (ov, len, s) = all[0];
        (s, len, ov)
    }

    #[test]
    fn lexical_window_cat_example() {
        let lw = LexicalWindow::new("lw", 3, DEFAULT_CONTEXT_WINDOW);
        let text = "the cat sat on the mat";
        let q = "where did the cat sit";
        let pred = lw.predict(&passage(text), q).unwrap();
        let norms: Vec<String> = tokenize_passage(text).into_iter().map(|t| t.norm).collect();
        let qt = metrics::normalize(q);
        let (s, len, ov) = brute_best(&norms, &qt, 3, DEFAULT_CONTEXT_WINDOW);
        let (span, score) = lw.best_span(&norms, &qt).unwrap();
        assert_eq!((span.start, span.len(), score.overlap), (s, len, ov));
        assert_eq!(&text[pred.char_start..pred.char_end], pred.text);
        // the only shared content word is "cat"; every maximal window sees it
        assert_eq!(score.overlap, 1);
        assert_eq!(pred.text, "the");
    }

    #[test]
    fn score_monotone_in_overlap() {
        let toks: Vec<String> = "alpha beta gamma delta epsilon zeta eta theta".split(' ').map(String::from).collect();
        let q = metrics::normalize("gamma");
        assert!(score_window(&toks, 2..3, &q, 0) > score_window(&toks, 6..7, &q, 0));
        assert_eq!(score_window(&toks, 6..7, &q, 0), 0.0);
        assert_eq!(score_window(&toks, 1..2, &q, 1), 0.5);
    }

    #[test]
    fn ties_prefer_earliest_start() {
        let toks: Vec<String> = "x y x y".split(' ').map(String::from).collect();
        let q = metrics::normalize("x");
        let lw = LexicalWindow::new("lw", 2, 0);
        let (span, _) = lw.best_span(&toks, &q).unwrap();
        assert_eq!(span, 0..1);
    }

    #[test]
    fn wordless_passage_yields_empty_prediction() {
        let lw = LexicalWindow::new("lw", 3, 1);
        let p = lw.predict(&passage("... !!! —"), "what").unwrap();
        assert_eq!((p.text.as_str(), p.char_start, p.char_end), ("", 0, 0));
    }

    proptest! {
        #[test]
        fn argmax_matches_exhaustive_search(
            words in prop::collection::vec(0usize..12, 50),
            qwords in prop::collection::vec(0usize..12, 1..6),
            max_len in 1usize..6,
            w in 0usize..4,
        ) {
            let vocab = ["red", "blue", "green", "cat", "dog", "sun", "moon", "tree", "river", "stone", "king", "wind"];
            let text = words.iter().map(|i| vocab[*i]).collect::<Vec<_>>().join(" ");
            let question = qwords.iter().map(|i| vocab[*i]).collect::<Vec<_>>().join(" ");
            let norms: Vec<String> = tokenize_passage(&text).into_iter().map(|t| t.norm).collect();
            let qt = metrics::normalize(&question);
            let lw = LexicalWindow::new("lw", max_len, w);
            let (span, score) = lw.best_span(&norms, &qt).unwrap();
            let (s, len, ov) = brute_best(&norms, &qt, max_len, w);
            prop_assert_eq!((span.start, span.len(), score.overlap), (s, len, ov));
        }

        #[test]
        fn lexical_window_is_deterministic_and_grounded(text in "[a-zA-Zé .,;!?]{1,80}", q in "[a-z ]{1,20}") {
            let lw = LexicalWindow::new("lw", 4, 2);
            let p = passage(&text);
            let a = lw.predict(&p, &q).unwrap();
            let b = lw.predict(&p, &q).unwrap();
            prop_assert_eq!(&a.text, &b.text);
            prop_assert_eq!((a.char_start, a.char_end), (b.char_start, b.char_end));
            prop_assert_eq!(char_slice(&text, a.char_start, a.char_end), Some(a.text.as_str()));
        }
    }

    #[test]
    fn parse_remote_response_checks_offsets() {
        let text = "the cat sat";
        assert_eq!(
            parse_remote_response(r#"{"answer":"cat","char_start":4,"char_end":7}"#, text).unwrap(),
            ("cat".to_string(), 4, 7)
        );
        for body in [
            r#"{"answer":"cat","char_start":3,"char_end":6}"#,
            r#"{"answer":"cat","char_start":7,"char_end":4}"#,
            r#"{"answer":"cat","char_start":9,"char_end":40}"#,
            r#"{"answer":"cat"}"#,
            "not json",
        ] {
            assert!(matches!(parse_remote_response(body, text), Err(AdversaryError::MalformedResponse(_))), "{body}");
        }
    }

    /// Loopback HTTP server answering each request with one scripted reply.
    fn serve(replies: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (format!("http://{addr}"), handle)
    }

    #[test]
    fn remote_round_trip_and_retry() {
        let (url, server) = serve(vec![
            (503, "{}".into()),
            (200, r#"{"answer":"sat","char_start":8,"char_end":11}"#.into()),
        ]);
        let remote = RemoteAdversary::new("r", &url, Duration::from_secs(5), 2, 2);
        let p = remote.predict(&passage("the cat sat"), "what did it do").unwrap();
        assert_eq!((p.text.as_str(), p.char_start, p.char_end), ("sat", 8, 11));
        let bodies = server.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent, serde_json::json!({"passage": "the cat sat", "question": "what did it do"}));
    }

    #[test]
    fn remote_unreachable_is_retryable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let remote = RemoteAdversary::new("r", &url, Duration::from_millis(500), 1, 1);
        let err = remote.predict(&passage("x y"), "q").unwrap_err();
        assert!(err.is_retryable(), "{err:?}");
    }

    #[test]
    fn remote_malformed_is_not_retried() {
        let (url, server) = serve(vec![(200, r#"{"answer":"dog","char_start":0,"char_end":3}"#.into())]);
        let remote = RemoteAdversary::new("r", &url, Duration::from_secs(5), 2, 1);
        let err = remote.predict(&passage("the cat"), "q").unwrap_err();
        assert!(matches!(err, AdversaryError::MalformedResponse(_)));
        assert_eq!(server.join().unwrap().len(), 1);
    }
}
