//! Annotation state machines.
//!
//! Every state change is an [`Event`] appended to the log and then applied
//! to [`EngineState`]; replaying a log through [`Engine::replay`] rebuilds the
//! same state. Commands validate against the current state before emitting,
//! so a rejected command leaves both state and log untouched.
//!
//! Lifecycles:
//! - worker: `untrained → in_training → qualified → revoked`, with a rejected
//!   training review returning to `untrained`;
//! - generation HIT: `open → completed` or `open → discarded`;
//! - question: `retained → discarded | dropped_unanswerable`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex, RwLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{self, AdversaryError, AdversaryRegistry, Prediction};
use crate::analysis::ComprehensionLabel;
use crate::eventlog::{Clock, EventLogError, EventLogWriter, EventRecord, SystemClock};
use crate::metrics::{self, AdjudicationPolicy, MatchScore};
use crate::store::{Passage, QuestionRecord, QuestionStatus, Span, Split, ValidationAssignment};

pub const DEFAULT_MAX_QUESTIONS: usize = 5;
pub const DEFAULT_HIT_PAY_CENTS: u64 = 200;
pub const DEFAULT_REVIEW_BATCH: u64 = 10;
pub const REVIEW_SUCCESS_THRESHOLD: f64 = 0.8;
pub const ANSWERABLE_WORKER_THRESHOLD: f64 = 0.5;
pub const MIN_VALIDATIONS: usize = 3;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("worker {0} is not qualified")]
    NotQualified(String),
    #[error("no passages left in the {split} pool for worker {worker_id}")]
    NoPassagesLeft { worker_id: String, split: Split },
    #[error("span [{char_start}, {char_end}) is not a valid span of passage {passage_id}")]
    SpanOutOfBounds {
        passage_id: String,
        char_start: usize,
        char_end: usize,
    },
    #[error("HIT {0} is closed")]
    HitClosed(String),
    #[error("HIT {hit_id} already holds its maximum of {max} questions")]
    HitFull { hit_id: String, max: usize },
    #[error("HIT {hit_id} does not belong to worker {worker_id}")]
    ReviewOfForeignHit { worker_id: String, hit_id: String },
    #[error("HIT {0} has already been reviewed")]
    AlreadyReviewed(String),
    #[error("{} question(s) lack {MIN_VALIDATIONS} validations: {}", .0.len(), .0.join(", "))]
    InsufficientValidations(Vec<String>),
    #[error("training incomplete: {0}")]
    IncompleteTraining(String),
    #[error("worker {worker_id} does not meet eligibility requirements: {reason}")]
    Ineligible { worker_id: String, reason: String },
    #[error("validator {validator_id} authored question {question_id}")]
    SelfValidation { validator_id: String, question_id: String },
    #[error("validator {validator_id} already answered question {question_id}")]
    DuplicateValidation { validator_id: String, question_id: String },
    #[error("illegal transition: {0}")]
    IllegalTransition(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unknown {kind} {id}")]
    NotFound { kind: &'static str, id: String },
    #[error("{kind} {id} already exists")]
    AlreadyExists { kind: &'static str, id: String },
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Log(#[from] EventLogError),
    #[error("event {seq} cannot be applied: {reason}")]
    InconsistentLog { seq: u64, reason: String },
}

impl EngineError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EngineError::Adversary(e) if e.is_retryable())
    }

    fn not_found(kind: &'static str, id: &str) -> Self {
        EngineError::NotFound { kind, id: id.to_owned() }
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

/// Number of HITs to review for a worker with `n` completed HITs:
/// `min(⌊5·log₁₀(n) + 1⌋, n)`, and 0 when nothing was completed.
///
/// `⌊5·log₁₀(n)⌋ + 1` is the number of decimal digits of `n⁵`, which is
/// computed exactly while `n⁵` fits in 128 bits.
pub fn review_sample_size(n: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let k = match (n as u128).checked_pow(5) {
        Some(p) => p.ilog10() as u64 + 1,
        None => (5.0 * (n as f64).log10() + 1.0).floor() as u64,
    };
    k.min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerState {
    Untrained,
    InTraining,
    Qualified,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eligibility {
    pub country: String,
    pub approval_rate: f64,
    pub lifetime_hits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EligibilityRules {
    pub min_approval_rate: f64,
    pub min_lifetime_hits: u64,
    pub countries: Vec<String>,
}

impl Default for EligibilityRules {
    fn default() -> Self {
        Self {
            min_approval_rate: 0.98,
            min_lifetime_hits: 1000,
            countries: vec!["CA".into(), "GB".into(), "US".into()],
        }
    }
}

impl EligibilityRules {
    pub fn check(&self, e: &Eligibility) -> Result<(), String> {
        if !self.countries.is_empty() && !self.countries.iter().any(|c| c.eq_ignore_ascii_case(&e.country)) {
            return Err(format!("country {} not in allowlist", e.country));
        }
        if e.approval_rate < self.min_approval_rate {
            return Err(format!("approval rate {} below {}", e.approval_rate, self.min_approval_rate));
        }
        if e.lifetime_hits < self.min_lifetime_hits {
            return Err(format!("{} lifetime HITs below {}", e.lifetime_hits, self.min_lifetime_hits));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingTask {
    /// Write a question for a given answer.
    QuestionForAnswer,
    /// Highlight the answer to a given question.
    AnswerForQuestion,
    /// Write a full question-answer pair.
    FullPair,
    /// Complete a sample generation HIT.
    SampleHit,
}

impl TrainingTask {
    pub const REQUIRED: [(TrainingTask, usize); 4] = [
        (TrainingTask::QuestionForAnswer, 2),
        (TrainingTask::AnswerForQuestion, 2),
        (TrainingTask::FullPair, 1),
        (TrainingTask::SampleHit, 1),
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingArtifact {
    pub task: TrainingTask,
    #[serde(default)]
    pub passage_id: Option<String>,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub id: String,
    pub state: WorkerState,
    pub eligibility: Eligibility,
    /// n, the input to the review sampling formula.
    pub completed_hits: u64,
    pub reviewed_ok: u64,
    pub reviewed_total: u64,
    pub answerable: u64,
    pub answer_validated_total: u64,
    /// Set when the worker's data was discarded for low answerability.
    pub data_discarded: bool,
    pub training: Vec<TrainingArtifact>,
    pub archived_training: Vec<Vec<TrainingArtifact>>,
    pub seen_passages: BTreeSet<String>,
    pub pending_review: Vec<String>,
}

impl WorkerProfile {
    /// Excluded workers contribute nothing to any export.
    pub fn is_excluded(&self) -> bool {
        self.state == WorkerState::Revoked || self.data_discarded
    }

    pub fn review_success_rate(&self) -> Option<f64> {
        (self.reviewed_total > 0).then(|| self.reviewed_ok as f64 / self.reviewed_total as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitState {
    Open,
    Completed,
    Discarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewVerdict {
    Ok,
    Bad,
}

/// One question attempt and the model's response to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub question_text: String,
    pub human_span: Span,
    pub model_prediction: Prediction,
    pub score: MatchScore,
    pub timestamp: u64,
    /// Set iff the question beat the model and was retained.
    pub question_id: Option<String>,
}

impl AttemptRecord {
    pub fn retained(&self) -> bool {
        self.question_id.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationHit {
    pub id: String,
    pub worker_id: String,
    pub passage_id: String,
    pub adversary_id: String,
    pub split: Split,
    pub state: HitState,
    pub attempts: Vec<AttemptRecord>,
    pub retained: Vec<String>,
    pub pay_cents: u64,
    pub max_questions: usize,
    pub opened_at: u64,
    pub completed_at: Option<u64>,
    pub flagged_for_review: bool,
    pub review: Option<ReviewVerdict>,
}

impl GenerationHit {
    pub fn duration_ms(&self) -> Option<u64> {
        self.completed_at.map(|c| c.saturating_sub(self.opened_at))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub passage: Passage,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub split: Split,
    pub checked: Vec<String>,
    pub answerable: Vec<String>,
    pub dropped: Vec<String>,
    pub discarded_workers: Vec<String>,
    /// Fraction of checked questions found answerable.
    pub answerability_rate: f64,
}

/// Everything the engine knows, in deterministic (sorted) order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub passages: BTreeMap<String, PoolEntry>,
    pub workers: BTreeMap<String, WorkerProfile>,
    pub hits: BTreeMap<String, GenerationHit>,
    pub questions: BTreeMap<String, QuestionRecord>,
    pub reports: Vec<ValidationReport>,
    pub last_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Event {
    PassagesLoaded {
        split: Split,
        passages: Vec<Passage>,
    },
    WorkerRegistered {
        worker_id: String,
        eligibility: Eligibility,
    },
    TrainingSubmitted {
        worker_id: String,
        artifacts: Vec<TrainingArtifact>,
    },
    TrainingReviewed {
        worker_id: String,
        approved: bool,
    },
    HitOpened {
        hit_id: String,
        worker_id: String,
        passage_id: String,
        adversary_id: String,
        split: Split,
        max_questions: usize,
        pay_cents: u64,
    },
    AttemptRecorded {
        hit_id: String,
        attempt: AttemptRecord,
    },
    HitCompleted {
        hit_id: String,
    },
    ReviewSampleDrawn {
        worker_id: String,
        hit_ids: Vec<String>,
    },
    ReviewRecorded {
        worker_id: String,
        hit_id: String,
        verdict: ReviewVerdict,
    },
    WorkerRevoked {
        worker_id: String,
        reason: String,
    },
    ValidationRecorded {
        assignment: ValidationAssignment,
    },
    AnswerabilityDecided {
        report: ValidationReport,
    },
    LabelsTagged {
        question_id: String,
        labels: Vec<ComprehensionLabel>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub policy: AdjudicationPolicy,
    pub review_batch_size: u64,
    pub max_questions: usize,
    pub hit_pay_cents: u64,
    pub seed: u64,
    pub eligibility: EligibilityRules,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            policy: AdjudicationPolicy::default(),
            review_batch_size: DEFAULT_REVIEW_BATCH,
            max_questions: DEFAULT_MAX_QUESTIONS,
            hit_pay_cents: DEFAULT_HIT_PAY_CENTS,
            seed: 0,
            eligibility: EligibilityRules::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PassageSelector {
    /// Uniformly at random among the split's passages the worker has not seen.
    Split(Split),
    /// A specific pool passage.
    Passage(String),
}

/// A validated submission awaiting the adversary's prediction.
#[derive(Debug, Clone)]
pub struct PreparedSubmission {
    pub hit_id: String,
    pub adversary_id: String,
    pub passage: Passage,
    pub question: String,
    pub span: Span,
}

pub struct Engine {
    config: EngineConfig,
    state: EngineState,
    log: Vec<EventRecord>,
    sink: Option<EventLogWriter>,
    clock: Arc<dyn Clock>,
    adversaries: AdversaryRegistry,
}

impl Engine {
    pub fn new(config: EngineConfig, adversaries: AdversaryRegistry) -> Self {
        Self {
            config,
            state: EngineState::default(),
            log: Vec::new(),
            sink: None,
            clock: Arc::new(SystemClock),
            adversaries,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Persists every subsequent event through `sink`.
    pub fn with_sink(mut self, sink: EventLogWriter) -> Self {
        self.sink = Some(sink);
        self
    }

    /// Rebuilds an engine from a log. Adversaries are not consulted; every
    /// prediction is read from the recorded attempts.
    pub fn replay(config: EngineConfig, adversaries: AdversaryRegistry, records: Vec<EventRecord>) -> Result<Self> {
        let mut engine = Engine::new(config, adversaries);
        for record in records {
            if record.seq != engine.state.last_seq + 1 {
                return Err(EngineError::InconsistentLog {
                    seq: record.seq,
                    reason: format!("expected seq {}", engine.state.last_seq + 1),
                });
            }
            engine.state.apply(&record)?;
            engine.log.push(record);
        }
        Ok(engine)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn log(&self) -> &[EventRecord] {
        &self.log
    }

    pub fn adversaries(&self) -> &AdversaryRegistry {
        &self.adversaries
    }

    /// Pretty JSON of the full state; identical logs give identical bytes.
    pub fn snapshot_json(&self) -> String {
        serde_json::to_string_pretty(&self.state).expect("engine state serializes")
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(sink) = self.sink.as_mut() {
            sink.flush()?;
        }
        Ok(())
    }

    fn emit(&mut self, event: Event) -> Result<&EventRecord> {
        let record = EventRecord {
            seq: self.state.last_seq + 1,
            timestamp: self.clock.now_ms(),
            event,
        };
        // commands validate before emitting, so apply only fails on a bug;
        // the record is made durable first so state never runs ahead of the log
        if let Some(sink) = self.sink.as_mut() {
            sink.append(&record)?;
        }
        self.state.apply(&record)?;
        self.log.push(record);
        Ok(self.log.last().expect("just pushed"))
    }

    fn worker(&self, id: &str) -> Result<&WorkerProfile> {
        self.state.workers.get(id).ok_or_else(|| EngineError::not_found("worker", id))
    }

    fn hit(&self, id: &str) -> Result<&GenerationHit> {
        self.state.hits.get(id).ok_or_else(|| EngineError::not_found("hit", id))
    }

    fn question(&self, id: &str) -> Result<&QuestionRecord> {
        self.state.questions.get(id).ok_or_else(|| EngineError::not_found("question", id))
    }

    pub fn passage(&self, id: &str) -> Result<&PoolEntry> {
        self.state.passages.get(id).ok_or_else(|| EngineError::not_found("passage", id))
    }

    pub fn load_passages(&mut self, split: Split, passages: Vec<Passage>) -> Result<usize> {
        let mut seen = BTreeSet::new();
        for p in &passages {
            if p.text.is_empty() {
                return Err(EngineError::InvalidInput(format!("passage {} is empty", p.id)));
            }
            if !seen.insert(p.id.as_str()) || self.state.passages.contains_key(&p.id) {
                return Err(EngineError::AlreadyExists {
                    kind: "passage",
                    id: p.id.clone(),
                });
            }
        }
        let n = passages.len();
        self.emit(Event::PassagesLoaded { split, passages })?;
        Ok(n)
    }

    pub fn register_worker(&mut self, worker_id: &str, eligibility: Eligibility) -> Result<&WorkerProfile> {
        if worker_id.is_empty() {
            return Err(EngineError::InvalidInput("worker id is empty".into()));
        }
        if self.state.workers.contains_key(worker_id) {
            return Err(EngineError::AlreadyExists {
                kind: "worker",
                id: worker_id.to_owned(),
            });
        }
        self.config
            .eligibility
            .check(&eligibility)
            .map_err(|reason| EngineError::Ineligible {
                worker_id: worker_id.to_owned(),
                reason,
            })?;
        self.emit(Event::WorkerRegistered {
            worker_id: worker_id.to_owned(),
            eligibility,
        })?;
        self.worker(worker_id)
    }

    pub fn submit_training(&mut self, worker_id: &str, artifacts: Vec<TrainingArtifact>) -> Result<&WorkerProfile> {
        let worker = self.worker(worker_id)?;
        if !matches!(worker.state, WorkerState::Untrained | WorkerState::InTraining) {
            return Err(EngineError::IllegalTransition(format!(
                "worker {worker_id} is {:?} and cannot submit training",
                worker.state
            )));
        }
        let mut missing = Vec::new();
        for (task, needed) in TrainingTask::REQUIRED {
            let have = artifacts
                .iter()
                .filter(|a| a.task == task && !a.question.trim().is_empty() && !a.answer.trim().is_empty())
                .count();
            if have < needed {
                missing.push(format!("{task:?} {have}/{needed}"));
            }
        }
        if !missing.is_empty() {
            return Err(EngineError::IncompleteTraining(missing.join(", ")));
        }
        self.emit(Event::TrainingSubmitted {
            worker_id: worker_id.to_owned(),
            artifacts,
        })?;
        self.worker(worker_id)
    }

    pub fn review_training(&mut self, worker_id: &str, approved: bool) -> Result<&WorkerProfile> {
        let worker = self.worker(worker_id)?;
        if worker.state != WorkerState::InTraining {
            return Err(EngineError::IllegalTransition(format!(
                "worker {worker_id} is {:?}, not awaiting training review",
                worker.state
            )));
        }
        self.emit(Event::TrainingReviewed {
            worker_id: worker_id.to_owned(),
            approved,
        })?;
        self.worker(worker_id)
    }

    /// Training submission followed by the admin's verdict.
    pub fn qualification_flow(
        &mut self,
        worker_id: &str,
        artifacts: Vec<TrainingArtifact>,
        approved: bool,
    ) -> Result<&WorkerProfile> {
        self.submit_training(worker_id, artifacts)?;
        self.review_training(worker_id, approved)
    }

    pub fn open_generation_hit(
        &mut self,
        worker_id: &str,
        adversary_id: &str,
        selector: PassageSelector,
    ) -> Result<&GenerationHit> {
        let worker = self.worker(worker_id)?;
        if worker.state != WorkerState::Qualified || worker.data_discarded {
            return Err(EngineError::NotQualified(worker_id.to_owned()));
        }
        if !self.adversaries.contains(adversary_id) {
            return Err(EngineError::not_found("adversary", adversary_id));
        }
        let (passage_id, split) = match selector {
            PassageSelector::Passage(id) => {
                let entry = self.passage(&id)?;
                if worker.seen_passages.contains(&id) {
                    return Err(EngineError::NoPassagesLeft {
                        worker_id: worker_id.to_owned(),
                        split: entry.split,
                    });
                }
                (id, entry.split)
            }
            PassageSelector::Split(split) => {
                let candidates: Vec<&String> = self
                    .state
                    .passages
                    .iter()
                    .filter(|(id, e)| e.split == split && !worker.seen_passages.contains(*id))
                    .map(|(id, _)| id)
                    .collect();
                if candidates.is_empty() {
                    return Err(EngineError::NoPassagesLeft {
                        worker_id: worker_id.to_owned(),
                        split,
                    });
                }
                let mut rng = self.rng();
                (candidates[rng.random_range(0..candidates.len())].clone(), split)
            }
        };
        let hit_id = format!("hit-{:06}", self.state.hits.len() + 1);
        self.emit(Event::HitOpened {
            hit_id: hit_id.clone(),
            worker_id: worker_id.to_owned(),
            passage_id,
            adversary_id: adversary_id.to_owned(),
            split,
            max_questions: self.config.max_questions,
            pay_cents: self.config.hit_pay_cents,
        })?;
        self.hit(&hit_id)
    }

    /// RNG for the next event, derived from the seed and sequence number so
    /// no hidden generator state has to survive a restart.
    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.state.last_seq + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Validates a submission without calling the adversary.
    pub fn prepare_submission(&self, hit_id: &str, question: &str, span: Span) -> Result<PreparedSubmission> {
        let hit = self.hit(hit_id)?;
        if hit.state != HitState::Open {
            return Err(EngineError::HitClosed(hit_id.to_owned()));
        }
        if hit.retained.len() >= hit.max_questions {
            return Err(EngineError::HitFull {
                hit_id: hit_id.to_owned(),
                max: hit.max_questions,
            });
        }
        if question.trim().is_empty() {
            return Err(EngineError::InvalidInput("question is empty".into()));
        }
        let passage = &self.passage(&hit.passage_id)?.passage;
        if !span.is_valid_in(&passage.text) {
            return Err(EngineError::SpanOutOfBounds {
                passage_id: passage.id.clone(),
                char_start: span.char_start,
                char_end: span.char_end,
            });
        }
        Ok(PreparedSubmission {
            hit_id: hit_id.to_owned(),
            adversary_id: hit.adversary_id.clone(),
            passage: passage.clone(),
            question: question.to_owned(),
            span,
        })
    }

    /// Adjudicates a prediction for a prepared submission and records the attempt.
    pub fn commit_submission(&mut self, prepared: PreparedSubmission, prediction: Prediction) -> Result<AttemptRecord> {
        // state may have moved while the adversary was thinking
        let hit = self.hit(&prepared.hit_id)?;
        if hit.state != HitState::Open {
            return Err(EngineError::HitClosed(prepared.hit_id));
        }
        if hit.retained.len() >= hit.max_questions {
            return Err(EngineError::HitFull {
                hit_id: prepared.hit_id,
                max: hit.max_questions,
            });
        }
        let score = metrics::adjudicate(&prepared.span.text, &prediction.text, &self.config.policy);
        let question_id = score
            .human_win()
            .then(|| format!("{}-q{}", prepared.hit_id, hit.retained.len() + 1));
        let attempt = AttemptRecord {
            question_text: prepared.question,
            human_span: prepared.span,
            model_prediction: prediction,
            score,
            timestamp: self.clock.now_ms(),
            question_id,
        };
        self.emit(Event::AttemptRecorded {
            hit_id: prepared.hit_id,
            attempt: attempt.clone(),
        })?;
        Ok(attempt)
    }

    /// Asks the HIT's adversary and adjudicates; a retained attempt creates a
    /// question record. Adversary failures are returned and nothing is recorded.
    pub fn submit_question(&mut self, hit_id: &str, question: &str, span: Span) -> Result<AttemptRecord> {
        let prepared = self.prepare_submission(hit_id, question, span)?;
        let adv = self
            .adversaries
            .get(&prepared.adversary_id)
            .cloned()
            .ok_or_else(|| EngineError::not_found("adversary", &prepared.adversary_id))?;
        let prediction = adversary::predict(adv.as_ref(), &prepared.passage, &prepared.question)?;
        self.commit_submission(prepared, prediction)
    }

    /// Closes a HIT. A HIT without retained questions is accepted but flagged;
    /// finishing a review batch draws that worker's review sample.
    pub fn complete_hit(&mut self, hit_id: &str) -> Result<&GenerationHit> {
        let hit = self.hit(hit_id)?;
        if hit.state != HitState::Open {
            return Err(EngineError::HitClosed(hit_id.to_owned()));
        }
        let worker_id = hit.worker_id.clone();
        self.emit(Event::HitCompleted {
            hit_id: hit_id.to_owned(),
        })?;
        let worker = self.worker(&worker_id)?;
        let batch = self.config.review_batch_size.max(1);
        if worker.state == WorkerState::Qualified && worker.completed_hits % batch == 0 {
            self.draw_review_sample(&worker_id)?;
        }
        self.hit(hit_id)
    }

    /// Selects `review_sample_size(n)` of the worker's completed, unreviewed
    /// HITs for manual review. Flagged HITs are always selected first.
    pub fn draw_review_sample(&mut self, worker_id: &str) -> Result<Vec<String>> {
        let worker = self.worker(worker_id)?;
        if worker.state != WorkerState::Qualified {
            return Err(EngineError::NotQualified(worker_id.to_owned()));
        }
        let pending: BTreeSet<&String> = worker.pending_review.iter().collect();
        let (mut flagged, mut rest): (Vec<&GenerationHit>, Vec<&GenerationHit>) = self
            .state
            .hits
            .values()
            .filter(|h| {
                h.worker_id == worker_id
                    && h.state == HitState::Completed
                    && h.review.is_none()
                    && !pending.contains(&h.id)
            })
            .partition(|h| h.flagged_for_review);
        let want = review_sample_size(worker.completed_hits) as usize;
        let mut rng = self.rng();
        rest.shuffle(&mut rng);
        flagged.extend(rest);
        let hit_ids: Vec<String> = flagged.into_iter().take(want).map(|h| h.id.clone()).collect();
        self.emit(Event::ReviewSampleDrawn {
            worker_id: worker_id.to_owned(),
            hit_ids: hit_ids.clone(),
        })?;
        Ok(hit_ids)
    }

    /// Records an admin verdict. A success rate below 80% after any verdict
    /// revokes the worker and discards every question they wrote.
    pub fn record_review(&mut self, worker_id: &str, hit_id: &str, verdict: ReviewVerdict) -> Result<&WorkerProfile> {
        let worker = self.worker(worker_id)?;
        let hit = self.hit(hit_id)?;
        if hit.worker_id != worker_id {
            return Err(EngineError::ReviewOfForeignHit {
                worker_id: worker_id.to_owned(),
                hit_id: hit_id.to_owned(),
            });
        }
        // verdicts on an already revoked worker still count, so the counters
        // describe every review that was performed
        if !matches!(worker.state, WorkerState::Qualified | WorkerState::Revoked) {
            return Err(EngineError::NotQualified(worker_id.to_owned()));
        }
        if hit.state != HitState::Completed {
            return Err(EngineError::IllegalTransition(format!("HIT {hit_id} is not completed")));
        }
        if hit.review.is_some() {
            return Err(EngineError::AlreadyReviewed(hit_id.to_owned()));
        }
        self.emit(Event::ReviewRecorded {
            worker_id: worker_id.to_owned(),
            hit_id: hit_id.to_owned(),
            verdict,
        })?;
        self.worker(worker_id)
    }

    pub fn revoke_worker(&mut self, worker_id: &str, reason: &str) -> Result<&WorkerProfile> {
        let worker = self.worker(worker_id)?;
        if worker.state == WorkerState::Revoked {
            return Err(EngineError::IllegalTransition(format!("worker {worker_id} is already revoked")));
        }
        self.emit(Event::WorkerRevoked {
            worker_id: worker_id.to_owned(),
            reason: reason.to_owned(),
        })?;
        self.worker(worker_id)
    }

    pub fn record_validation(&mut self, question_id: &str, validator_id: &str, span: Span) -> Result<ValidationAssignment> {
        let q = self.question(question_id)?;
        if !q.split.requires_validation() {
            return Err(EngineError::IllegalTransition(format!(
                "question {question_id} is in the train split and is not validated"
            )));
        }
        if q.status != QuestionStatus::Retained || q.answerable.is_some() {
            return Err(EngineError::IllegalTransition(format!(
                "question {question_id} is no longer open for validation"
            )));
        }
        if validator_id.is_empty() {
            return Err(EngineError::InvalidInput("validator id is empty".into()));
        }
        if q.worker_id == validator_id {
            return Err(EngineError::SelfValidation {
                validator_id: validator_id.to_owned(),
                question_id: question_id.to_owned(),
            });
        }
        if q.validations.iter().any(|v| v.validator_id == validator_id) {
            return Err(EngineError::DuplicateValidation {
                validator_id: validator_id.to_owned(),
                question_id: question_id.to_owned(),
            });
        }
        let passage = &self.passage(&q.passage_id)?.passage;
        if !span.is_valid_in(&passage.text) {
            return Err(EngineError::SpanOutOfBounds {
                passage_id: passage.id.clone(),
                char_start: span.char_start,
                char_end: span.char_end,
            });
        }
        let assignment = ValidationAssignment {
            question_id: question_id.to_owned(),
            validator_id: validator_id.to_owned(),
            matched: self.config.policy.matches(&q.gold.text, &span.text),
            answer_span: span,
        };
        self.emit(Event::ValidationRecorded {
            assignment: assignment.clone(),
        })?;
        Ok(assignment)
    }

    /// Questions the validator may still answer.
    pub fn validation_queue(&self, validator_id: &str) -> Vec<&QuestionRecord> {
        self.state
            .questions
            .values()
            .filter(|q| {
                q.split.requires_validation()
                    && q.status == QuestionStatus::Retained
                    && q.answerable.is_none()
                    && q.worker_id != validator_id
                    && q.validations.len() < MIN_VALIDATIONS
                    && q.validations.iter().all(|v| v.validator_id != validator_id)
            })
            .collect()
    }

    /// Decides answerability for every undecided retained question of a
    /// dev/test split.
    ///
    /// A question is answerable when any validator's answer reaches the
    /// policy's match threshold against the original. Unanswerable questions
    /// are dropped; workers with fewer than half of their validated questions
    /// answerable lose all their data.
    pub fn run_answerability(&mut self, split: Split, policy: &AdjudicationPolicy) -> Result<ValidationReport> {
        if !split.requires_validation() {
            return Err(EngineError::InvalidInput("answerability applies to dev and test only".into()));
        }
        policy.validate().map_err(|e| EngineError::InvalidInput(e.to_string()))?;
        let pending: Vec<&QuestionRecord> = self
            .state
            .questions
            .values()
            .filter(|q| q.split == split && q.status == QuestionStatus::Retained && q.answerable.is_none())
            .collect();
        let lacking: Vec<String> = pending
            .iter()
            .filter(|q| {
                let distinct: BTreeSet<&str> = q
                    .validations
                    .iter()
                    .filter(|v| v.validator_id != q.worker_id)
                    .map(|v| v.validator_id.as_str())
                    .collect();
                distinct.len() < MIN_VALIDATIONS
            })
            .map(|q| q.id.clone())
            .collect();
        if !lacking.is_empty() {
            return Err(EngineError::InsufficientValidations(lacking));
        }

        let mut checked = Vec::new();
        let mut answerable = Vec::new();
        let mut dropped = Vec::new();
        let mut per_worker: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
        for q in &pending {
            let ok = q.validations.iter().any(|v| policy.matches(&q.gold.text, &v.answer_span.text));
            checked.push(q.id.clone());
            let tally = per_worker.entry(q.worker_id.as_str()).or_default();
            tally.1 += 1;
            if ok {
                tally.0 += 1;
                answerable.push(q.id.clone());
            } else {
                dropped.push(q.id.clone());
            }
        }
        let mut discarded_workers = Vec::new();
        for (worker_id, (ok, total)) in per_worker {
            let w = self.worker(worker_id)?;
            let ok = w.answerable + ok;
            let total = w.answer_validated_total + total;
            if !w.data_discarded && (ok as f64) < ANSWERABLE_WORKER_THRESHOLD * total as f64 {
                discarded_workers.push(worker_id.to_owned());
            }
        }
        let answerability_rate = if checked.is_empty() {
            0.0
        } else {
            answerable.len() as f64 / checked.len() as f64
        };
        let report = ValidationReport {
            split,
            checked,
            answerable,
            dropped,
            discarded_workers,
            answerability_rate,
        };
        self.emit(Event::AnswerabilityDecided { report: report.clone() })?;
        Ok(report)
    }

    pub fn tag_labels(&mut self, question_id: &str, labels: Vec<ComprehensionLabel>) -> Result<&QuestionRecord> {
        self.question(question_id)?;
        crate::analysis::check_labels(&labels).map_err(|e| EngineError::InvalidInput(e.to_string()))?;
        self.emit(Event::LabelsTagged {
            question_id: question_id.to_owned(),
            labels,
        })?;
        self.question(question_id)
    }

    pub fn worker_profile(&self, id: &str) -> Option<&WorkerProfile> {
        self.state.workers.get(id)
    }

    pub fn generation_hit(&self, id: &str) -> Option<&GenerationHit> {
        self.state.hits.get(id)
    }

    pub fn question_record(&self, id: &str) -> Option<&QuestionRecord> {
        self.state.questions.get(id)
    }
}

impl EngineState {
    fn inconsistent(seq: u64, reason: impl Into<String>) -> EngineError {
        EngineError::InconsistentLog {
            seq,
            reason: reason.into(),
        }
    }

    fn worker_mut(&mut self, seq: u64, id: &str) -> Result<&mut WorkerProfile> {
        self.workers
            .get_mut(id)
            .ok_or_else(|| Self::inconsistent(seq, format!("unknown worker {id}")))
    }

    fn hit_mut(&mut self, seq: u64, id: &str) -> Result<&mut GenerationHit> {
        self.hits
            .get_mut(id)
            .ok_or_else(|| Self::inconsistent(seq, format!("unknown hit {id}")))
    }

    /// Marks everything a worker produced as discarded.
    fn discard_worker_data(&mut self, worker_id: &str) {
        for q in self.questions.values_mut() {
            if q.worker_id == worker_id {
                q.status = QuestionStatus::Discarded;
            }
        }
        for h in self.hits.values_mut() {
            if h.worker_id == worker_id && h.state == HitState::Open {
                h.state = HitState::Discarded;
            }
        }
    }

    pub fn apply(&mut self, record: &EventRecord) -> Result<()> {
        let seq = record.seq;
        let at = record.timestamp;
        match &record.event {
            Event::PassagesLoaded { split, passages } => {
                for p in passages {
                    if self.passages.contains_key(&p.id) {
                        return Err(Self::inconsistent(seq, format!("passage {} loaded twice", p.id)));
                    }
                    self.passages.insert(
                        p.id.clone(),
                        PoolEntry {
                            passage: p.clone(),
                            split: *split,
                        },
                    );
                }
            }
            Event::WorkerRegistered { worker_id, eligibility } => {
                if self.workers.contains_key(worker_id) {
                    return Err(Self::inconsistent(seq, format!("worker {worker_id} registered twice")));
                }
                self.workers.insert(
                    worker_id.clone(),
                    WorkerProfile {
                        id: worker_id.clone(),
                        state: WorkerState::Untrained,
                        eligibility: eligibility.clone(),
                        completed_hits: 0,
                        reviewed_ok: 0,
                        reviewed_total: 0,
                        answerable: 0,
                        answer_validated_total: 0,
                        data_discarded: false,
                        training: Vec::new(),
                        archived_training: Vec::new(),
                        seen_passages: BTreeSet::new(),
                        pending_review: Vec::new(),
                    },
                );
            }
            Event::TrainingSubmitted { worker_id, artifacts } => {
                let w = self.worker_mut(seq, worker_id)?;
                w.state = WorkerState::InTraining;
                w.training = artifacts.clone();
            }
            Event::TrainingReviewed { worker_id, approved } => {
                let w = self.worker_mut(seq, worker_id)?;
                if *approved {
                    w.state = WorkerState::Qualified;
                } else {
                    w.state = WorkerState::Untrained;
                    let artifacts = std::mem::take(&mut w.training);
                    w.archived_training.push(artifacts);
                }
            }
            Event::HitOpened {
                hit_id,
                worker_id,
                passage_id,
                adversary_id,
                split,
                max_questions,
                pay_cents,
            } => {
                if !self.passages.contains_key(passage_id) {
                    return Err(Self::inconsistent(seq, format!("unknown passage {passage_id}")));
                }
                if self.hits.contains_key(hit_id) {
                    return Err(Self::inconsistent(seq, format!("hit {hit_id} opened twice")));
                }
                let w = self.worker_mut(seq, worker_id)?;
                w.seen_passages.insert(passage_id.clone());
                self.hits.insert(
                    hit_id.clone(),
                    GenerationHit {
                        id: hit_id.clone(),
                        worker_id: worker_id.clone(),
                        passage_id: passage_id.clone(),
                        adversary_id: adversary_id.clone(),
                        split: *split,
                        state: HitState::Open,
                        attempts: Vec::new(),
                        retained: Vec::new(),
                        pay_cents: *pay_cents,
                        max_questions: *max_questions,
                        opened_at: at,
                        completed_at: None,
                        flagged_for_review: false,
                        review: None,
                    },
                );
            }
            Event::AttemptRecorded { hit_id, attempt } => {
                let hit = self.hit_mut(seq, hit_id)?;
                if hit.state != HitState::Open {
                    return Err(Self::inconsistent(seq, format!("attempt on closed hit {hit_id}")));
                }
                hit.attempts.push(attempt.clone());
                if let Some(qid) = &attempt.question_id {
                    if attempt.score.model_win {
                        return Err(Self::inconsistent(seq, "retained attempt lost to the model"));
                    }
                    if hit.retained.len() >= hit.max_questions {
                        return Err(Self::inconsistent(seq, format!("hit {hit_id} over capacity")));
                    }
                    hit.retained.push(qid.clone());
                    let record = QuestionRecord {
                        id: qid.clone(),
                        hit_id: hit_id.clone(),
                        passage_id: hit.passage_id.clone(),
                        worker_id: hit.worker_id.clone(),
                        adversary_id: hit.adversary_id.clone(),
                        text: attempt.question_text.clone(),
                        gold: attempt.human_span.clone(),
                        model_answer_at_collection: attempt.model_prediction.clone(),
                        collection_score: attempt.score,
                        status: QuestionStatus::Retained,
                        split: hit.split,
                        labels: Vec::new(),
                        validations: Vec::new(),
                        answerable: None,
                    };
                    if self.questions.insert(qid.clone(), record).is_some() {
                        return Err(Self::inconsistent(seq, format!("question {qid} recorded twice")));
                    }
                } else if !attempt.score.model_win {
                    return Err(Self::inconsistent(seq, "winning attempt was not retained"));
                }
            }
            Event::HitCompleted { hit_id } => {
                let hit = self.hit_mut(seq, hit_id)?;
                if hit.state != HitState::Open {
                    return Err(Self::inconsistent(seq, format!("hit {hit_id} is not open")));
                }
                hit.state = HitState::Completed;
                hit.completed_at = Some(at);
                hit.flagged_for_review = hit.retained.is_empty();
                let worker_id = hit.worker_id.clone();
                self.worker_mut(seq, &worker_id)?.completed_hits += 1;
            }
            Event::ReviewSampleDrawn { worker_id, hit_ids } => {
                let w = self.worker_mut(seq, worker_id)?;
                w.pending_review.extend(hit_ids.iter().cloned());
            }
            Event::ReviewRecorded {
                worker_id,
                hit_id,
                verdict,
            } => {
                let hit = self.hit_mut(seq, hit_id)?;
                if hit.worker_id != *worker_id {
                    return Err(Self::inconsistent(seq, format!("hit {hit_id} is foreign to {worker_id}")));
                }
                hit.review = Some(*verdict);
                let w = self.worker_mut(seq, worker_id)?;
                w.pending_review.retain(|h| h != hit_id);
                w.reviewed_total += 1;
                if *verdict == ReviewVerdict::Ok {
                    w.reviewed_ok += 1;
                }
                if w.state != WorkerState::Revoked
                    && (w.reviewed_ok as f64) < REVIEW_SUCCESS_THRESHOLD * w.reviewed_total as f64
                {
                    w.state = WorkerState::Revoked;
                    self.discard_worker_data(worker_id);
                }
            }
            Event::WorkerRevoked { worker_id, .. } => {
                self.worker_mut(seq, worker_id)?.state = WorkerState::Revoked;
                self.discard_worker_data(worker_id);
            }
            Event::ValidationRecorded { assignment } => {
                let q = self
                    .questions
                    .get_mut(&assignment.question_id)
                    .ok_or_else(|| Self::inconsistent(seq, format!("unknown question {}", assignment.question_id)))?;
                if q.worker_id == assignment.validator_id {
                    return Err(Self::inconsistent(seq, "author validated own question"));
                }
                q.validations.push(assignment.clone());
            }
            Event::AnswerabilityDecided { report } => {
                let decided: HashMap<&str, bool> = report
                    .answerable
                    .iter()
                    .map(|id| (id.as_str(), true))
                    .chain(report.dropped.iter().map(|id| (id.as_str(), false)))
                    .collect();
                for (qid, ok) in &decided {
                    let q = self
                        .questions
                        .get_mut(*qid)
                        .ok_or_else(|| Self::inconsistent(seq, format!("unknown question {qid}")))?;
                    q.answerable = Some(*ok);
                    if !ok && q.status == QuestionStatus::Retained {
                        q.status = QuestionStatus::DroppedUnanswerable;
                    }
                    let worker_id = q.worker_id.clone();
                    let w = self.worker_mut(seq, &worker_id)?;
                    w.answer_validated_total += 1;
                    if *ok {
                        w.answerable += 1;
                    }
                }
                for worker_id in &report.discarded_workers {
                    self.worker_mut(seq, worker_id)?.data_discarded = true;
                    self.discard_worker_data(worker_id);
                }
                self.reports.push(report.clone());
            }
            Event::LabelsTagged { question_id, labels } => {
                let q = self
                    .questions
                    .get_mut(question_id)
                    .ok_or_else(|| Self::inconsistent(seq, format!("unknown question {question_id}")))?;
                q.labels = labels.clone();
            }
        }
        self.last_seq = seq;
        Ok(())
    }

    /// Per-adversary collection counters and HIT timing.
    pub fn collection_stats(&self) -> CollectionStats {
        let mut per_adversary: BTreeMap<String, AdversaryStats> = BTreeMap::new();
        let mut durations = Vec::new();
        for hit in self.hits.values() {
            let s = per_adversary.entry(hit.adversary_id.clone()).or_default();
            s.hits += 1;
            s.attempts += hit.attempts.len() as u64;
            s.human_wins += hit.attempts.iter().filter(|a| a.retained()).count() as u64;
            if let Some(d) = hit.duration_ms() {
                durations.push(d);
            }
        }
        for s in per_adversary.values_mut() {
            s.human_win_rate = (s.attempts > 0).then(|| s.human_wins as f64 / s.attempts as f64);
        }
        let mut workers_by_state: BTreeMap<String, u64> = BTreeMap::new();
        for w in self.workers.values() {
            let key = serde_json::to_value(w.state)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default();
            *workers_by_state.entry(key).or_default() += 1;
        }
        let mut questions_by_status: BTreeMap<String, u64> = BTreeMap::new();
        for q in self.questions.values() {
            let key = serde_json::to_value(q.status)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default();
            *questions_by_status.entry(key).or_default() += 1;
        }
        CollectionStats {
            per_adversary,
            mean_hit_seconds: (!durations.is_empty())
                .then(|| durations.iter().sum::<u64>() as f64 / durations.len() as f64 / 1000.0),
            workers_by_state,
            questions_by_status,
            passages: self.passages.len() as u64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdversaryStats {
    pub hits: u64,
    pub attempts: u64,
    pub human_wins: u64,
    pub human_win_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectionStats {
    pub per_adversary: BTreeMap<String, AdversaryStats>,
    pub mean_hit_seconds: Option<f64>,
    pub workers_by_state: BTreeMap<String, u64>,
    pub questions_by_status: BTreeMap<String, u64>,
    pub passages: u64,
}

/// Engine shared between concurrent requests.
///
/// Mutations are serialized through a write lock, except that the adversary
/// call of a submission runs outside it while holding only that HIT's lock.
pub struct SharedEngine {
    inner: RwLock<Engine>,
    hit_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl SharedEngine {
    pub fn new(engine: Engine) -> Self {
        Self {
            inner: RwLock::new(engine),
            hit_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn read<R>(&self, f: impl FnOnce(&Engine) -> R) -> R {
        f(&self.inner.read().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn write<R>(&self, f: impl FnOnce(&mut Engine) -> R) -> R {
        f(&mut self.inner.write().unwrap_or_else(|e| e.into_inner()))
    }

    fn hit_lock(&self, hit_id: &str) -> Arc<Mutex<()>> {
        self.hit_locks
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(hit_id.to_owned())
            .or_default()
            .clone()
    }

    pub fn submit_question(&self, hit_id: &str, question: &str, span: Span) -> Result<AttemptRecord> {
        let lock = self.hit_lock(hit_id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let (prepared, adv) = self.read(|e| {
            let prepared = e.prepare_submission(hit_id, question, span)?;
            let adv = e
                .adversaries()
                .get(&prepared.adversary_id)
                .cloned()
                .ok_or_else(|| EngineError::not_found("adversary", &prepared.adversary_id))?;
            Ok::<_, EngineError>((prepared, adv))
        })?;
        let prediction = adversary::predict(adv.as_ref(), &prepared.passage, &prepared.question)?;
        self.write(|e| e.commit_submission(prepared, prediction))
    }

    pub fn into_inner(self) -> Engine {
        self.inner.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}
