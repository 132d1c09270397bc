//! HTTP routes. Every response is a `v1` envelope; see [`crate::error`].

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequestParts, Path, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use advqa_core::adversary::Prediction;
use advqa_core::analysis::{parse_labels, ComprehensionLabel};
use advqa_core::engine::{
    AttemptRecord, CollectionStats, Eligibility, Engine, EngineError, GenerationHit, PassageSelector, PoolEntry,
    ReviewVerdict, SharedEngine, TrainingArtifact, ValidationReport, WorkerProfile,
};
use advqa_core::metrics::AdjudicationPolicy;
use advqa_core::store::{
    export_dataset, DatasetManifest, ExportRequest, Passage, QuestionRecord, Span, Split, ValidationAssignment,
};

use crate::config::{PlatformConfig, Role};
use crate::error::{ApiError, ApiResult, V1};

pub struct Inner {
    engine: SharedEngine,
    tokens: HashMap<String, Caller>,
    default_adversary: Option<String>,
    policy: AdjudicationPolicy,
    export_dir: PathBuf,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(engine: Engine, config: &PlatformConfig) -> Self {
        let tokens = config
            .tokens
            .iter()
            .map(|t| {
                (
                    t.token.clone(),
                    Caller {
                        role: t.role,
                        subject: t.subject.clone(),
                    },
                )
            })
            .collect();
        Self(Arc::new(Inner {
            engine: SharedEngine::new(engine),
            tokens,
            default_adversary: config.default_adversary_id().map(str::to_owned),
            policy: config.policy,
            export_dir: config.export_dir(),
        }))
    }

    pub fn engine(&self) -> &SharedEngine {
        &self.0.engine
    }
}

/// The authenticated principal behind a request.
#[derive(Debug, Clone, PartialEq)]
pub struct Caller {
    pub role: Role,
    pub subject: String,
}

impl Caller {
    fn require(&self, roles: &[Role]) -> Result<(), ApiError> {
        if roles.contains(&self.role) {
            Ok(())
        } else {
            Err(ApiError::forbidden(format!("{:?} tokens cannot use this endpoint", self.role)))
        }
    }
}

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or_else(ApiError::unauthorized)?;
        state.0.tokens.get(token).cloned().ok_or_else(ApiError::unauthorized)
    }
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

fn span_in(passage: &Passage, char_start: usize, char_end: usize, text: Option<&str>) -> Result<Span, ApiError> {
    match Span::from_offsets(&passage.text, char_start, char_end) {
        Some(span) if text.is_none_or(|t| t == span.text) => Ok(span),
        _ => Err(EngineError::SpanOutOfBounds {
            passage_id: passage.id.clone(),
            char_start,
            char_end,
        }
        .into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub adversaries: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenHitRequest {
    pub adversary_id: Option<String>,
    pub split: Option<Split>,
    pub passage_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitView {
    pub hit: GenerationHit,
    pub passage: Passage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitQuestionRequest {
    pub question: String,
    pub char_start: usize,
    pub char_end: usize,
    /// When given, must equal the passage text at the offsets.
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Beaten,
    NotBeaten,
}

/// What the annotator sees after each attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub outcome: Outcome,
    pub model_win: bool,
    pub f1: f64,
    pub model_answer: Prediction,
    pub question_id: Option<String>,
    pub retained_count: usize,
    pub attempt_count: usize,
    pub max_questions: usize,
    pub attempt: AttemptRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRequest {
    pub artifacts: Vec<TrainingArtifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationTask {
    pub question_id: String,
    pub question: String,
    pub passage: Passage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationAnswerRequest {
    pub char_start: usize,
    pub char_end: usize,
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterWorkerRequest {
    pub worker_id: String,
    pub eligibility: Eligibility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReviewRequest {
    pub approved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub hit_id: String,
    pub verdict: ReviewVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevokeRequest {
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadPassagesRequest {
    pub split: Split,
    pub passages: Vec<Passage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadPassagesResponse {
    pub loaded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsRequest {
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerabilityRequest {
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRequestBody {
    pub name: String,
    pub splits: Vec<Split>,
    #[serde(default)]
    pub adversary_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportResponse {
    pub manifest: DatasetManifest,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSample {
    pub hit_ids: Vec<String>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/me", get(me))
        .route("/api/training", post(submit_training))
        .route("/api/hits/generation", post(open_hit))
        .route("/api/hits/{id}", get(get_hit))
        .route("/api/hits/{id}/questions", post(submit_question))
        .route("/api/hits/{id}/complete", post(complete_hit))
        .route("/api/passages/{id}", get(get_passage))
        .route("/api/validation/queue", get(validation_queue))
        .route("/api/validation/{question_id}", get(validation_task))
        .route("/api/validation/{question_id}/answers", post(submit_validation))
        .route("/api/stats", get(stats))
        .route("/api/admin/workers", get(list_workers).post(register_worker))
        .route("/api/admin/workers/{id}", get(get_worker))
        .route("/api/admin/workers/{id}/training-review", post(training_review))
        .route("/api/admin/workers/{id}/review-sample", post(review_sample))
        .route("/api/admin/workers/{id}/review", post(record_review))
        .route("/api/admin/workers/{id}/revoke", post(revoke_worker))
        .route("/api/admin/passages", post(load_passages))
        .route("/api/admin/questions/{id}", get(get_question))
        .route("/api/admin/questions/{id}/labels", post(tag_labels))
        .route("/api/admin/answerability", post(answerability))
        .route("/api/admin/export", post(export))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> ApiResult<Health> {
    let adversaries = state.engine().read(|e| e.adversaries().ids());
    Ok(V1::new(Health {
        status: "ok".into(),
        adversaries,
    }))
}

async fn me(State(state): State<AppState>, caller: Caller) -> ApiResult<WorkerProfile> {
    caller.require(&[Role::Worker])?;
    state.engine().read(|e| {
        e.worker_profile(&caller.subject)
            .cloned()
            .map(V1::new)
            .ok_or_else(|| not_found("worker", &caller.subject))
    })
}

fn not_found(kind: &'static str, id: &str) -> ApiError {
    EngineError::NotFound { kind, id: id.to_owned() }.into()
}

async fn submit_training(
    State(state): State<AppState>,
    caller: Caller,
    payload: Result<Json<TrainingRequest>, JsonRejection>,
) -> ApiResult<WorkerProfile> {
    caller.require(&[Role::Worker])?;
    let req = body(payload)?;
    let profile = state
        .engine()
        .write(|e| e.submit_training(&caller.subject, req.artifacts).cloned())?;
    Ok(V1::new(profile))
}

fn hit_view(e: &Engine, hit: &GenerationHit) -> Result<HitView, ApiError> {
    let passage = e.passage(&hit.passage_id)?.passage.clone();
    Ok(HitView {
        hit: hit.clone(),
        passage,
    })
}

async fn open_hit(
    State(state): State<AppState>,
    caller: Caller,
    payload: Result<Json<OpenHitRequest>, JsonRejection>,
) -> ApiResult<HitView> {
    caller.require(&[Role::Worker])?;
    let req = body(payload)?;
    let adversary = req
        .adversary_id
        .or_else(|| state.0.default_adversary.clone())
        .ok_or_else(|| ApiError::bad_request("no adversary given and none configured"))?;
    let selector = match req.passage_id {
        Some(id) => PassageSelector::Passage(id),
        None => PassageSelector::Split(req.split.unwrap_or(Split::Train)),
    };
    let view = state.engine().write(|e| {
        let hit = e.open_generation_hit(&caller.subject, &adversary, selector)?.clone();
        hit_view(e, &hit)
    })?;
    Ok(V1::new(view))
}

/// Loads a HIT the caller may see: their own, or any for admins.
fn owned_hit(e: &Engine, caller: &Caller, id: &str) -> Result<GenerationHit, ApiError> {
    let hit = e.generation_hit(id).ok_or_else(|| not_found("hit", id))?;
    if caller.role != Role::Admin && hit.worker_id != caller.subject {
        return Err(ApiError::forbidden(format!("HIT {id} belongs to another worker")));
    }
    Ok(hit.clone())
}

async fn get_hit(State(state): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult<HitView> {
    caller.require(&[Role::Worker, Role::Admin])?;
    state.engine().read(|e| {
        let hit = owned_hit(e, &caller, &id)?;
        hit_view(e, &hit).map(V1::new)
    })
}

async fn submit_question(
    State(state): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    payload: Result<Json<SubmitQuestionRequest>, JsonRejection>,
) -> ApiResult<Verdict> {
    caller.require(&[Role::Worker])?;
    let req = body(payload)?;
    let span = state.engine().read(|e| {
        let hit = owned_hit(e, &caller, &id)?;
        let passage = &e.passage(&hit.passage_id)?.passage;
        span_in(passage, req.char_start, req.char_end, req.text.as_deref())
    })?;
    // the adversary may block up to its timeout; keep it off the async workers
    let worker_state = state.clone();
    let hit_id = id.clone();
    let attempt = tokio::task::spawn_blocking(move || worker_state.engine().submit_question(&hit_id, &req.question, span))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let hit = state.engine().read(|e| e.generation_hit(&id).cloned()).ok_or_else(|| not_found("hit", &id))?;
    Ok(V1::new(Verdict {
        outcome: if attempt.score.model_win { Outcome::NotBeaten } else { Outcome::Beaten },
        model_win: attempt.score.model_win,
        f1: attempt.score.f1,
        model_answer: attempt.model_prediction.clone(),
        question_id: attempt.question_id.clone(),
        retained_count: hit.retained.len(),
        attempt_count: hit.attempts.len(),
        max_questions: hit.max_questions,
        attempt,
    }))
}

async fn complete_hit(State(state): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult<GenerationHit> {
    caller.require(&[Role::Worker])?;
    let hit = state.engine().write(|e| {
        owned_hit(e, &caller, &id)?;
        e.complete_hit(&id).cloned().map_err(ApiError::from)
    })?;
    Ok(V1::new(hit))
}

async fn get_passage(State(state): State<AppState>, _caller: Caller, Path(id): Path<String>) -> ApiResult<PoolEntry> {
    Ok(V1::new(state.engine().read(|e| e.passage(&id).cloned())?))
}

fn validation_task_for(e: &Engine, q: &QuestionRecord) -> Result<ValidationTask, ApiError> {
    Ok(ValidationTask {
        question_id: q.id.clone(),
        question: q.text.clone(),
        passage: e.passage(&q.passage_id)?.passage.clone(),
    })
}

async fn validation_queue(State(state): State<AppState>, caller: Caller) -> ApiResult<Vec<ValidationTask>> {
    caller.require(&[Role::Worker, Role::Validator])?;
    state.engine().read(|e| {
        e.validation_queue(&caller.subject)
            .into_iter()
            .map(|q| validation_task_for(e, q))
            .collect::<Result<Vec<_>, _>>()
            .map(V1::new)
    })
}

async fn validation_task(
    State(state): State<AppState>,
    caller: Caller,
    Path(question_id): Path<String>,
) -> ApiResult<ValidationTask> {
    caller.require(&[Role::Worker, Role::Validator])?;
    state.engine().read(|e| {
        let q = e.question_record(&question_id).ok_or_else(|| not_found("question", &question_id))?;
        if q.worker_id == caller.subject {
            return Err(EngineError::SelfValidation {
                validator_id: caller.subject.clone(),
                question_id: question_id.clone(),
            }
            .into());
        }
        validation_task_for(e, q).map(V1::new)
    })
}

async fn submit_validation(
    State(state): State<AppState>,
    caller: Caller,
    Path(question_id): Path<String>,
    payload: Result<Json<ValidationAnswerRequest>, JsonRejection>,
) -> ApiResult<ValidationAssignment> {
    caller.require(&[Role::Worker, Role::Validator])?;
    let req = body(payload)?;
    let assignment = state.engine().write(|e| {
        let q = e.question_record(&question_id).ok_or_else(|| not_found("question", &question_id))?;
        let passage = &e.passage(&q.passage_id)?.passage;
        let span = span_in(passage, req.char_start, req.char_end, req.text.as_deref())?;
        e.record_validation(&question_id, &caller.subject, span).map_err(ApiError::from)
    })?;
    Ok(V1::new(assignment))
}

async fn stats(State(state): State<AppState>, _caller: Caller) -> ApiResult<CollectionStats> {
    Ok(V1::new(state.engine().read(|e| e.state().collection_stats())))
}

async fn list_workers(State(state): State<AppState>, caller: Caller) -> ApiResult<Vec<WorkerProfile>> {
    caller.require(&[Role::Admin])?;
    Ok(V1::new(state.engine().read(|e| e.state().workers.values().cloned().collect())))
}

async fn register_worker(
    State(state): State<AppState>,
    caller: Caller,
    payload: Result<Json<RegisterWorkerRequest>, JsonRejection>,
) -> ApiResult<WorkerProfile> {
    caller.require(&[Role::Admin])?;
    let req = body(payload)?;
    let profile = state
        .engine()
        .write(|e| e.register_worker(&req.worker_id, req.eligibility).cloned())?;
    Ok(V1::new(profile))
}

async fn get_worker(State(state): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult<WorkerProfile> {
    caller.require(&[Role::Admin])?;
    state
        .engine()
        .read(|e| e.worker_profile(&id).cloned())
        .map(V1::new)
        .ok_or_else(|| not_found("worker", &id))
}

async fn training_review(
    State(state): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    payload: Result<Json<TrainingReviewRequest>, JsonRejection>,
) -> ApiResult<WorkerProfile> {
    caller.require(&[Role::Admin])?;
    let req = body(payload)?;
    Ok(V1::new(state.engine().write(|e| e.review_training(&id, req.approved).cloned())?))
}

async fn review_sample(State(state): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult<ReviewSample> {
    caller.require(&[Role::Admin])?;
    let hit_ids = state.engine().write(|e| e.draw_review_sample(&id))?;
    Ok(V1::new(ReviewSample { hit_ids }))
}

async fn record_review(
    State(state): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    payload: Result<Json<ReviewRequest>, JsonRejection>,
) -> ApiResult<WorkerProfile> {
    caller.require(&[Role::Admin])?;
    let req = body(payload)?;
    Ok(V1::new(
        state.engine().write(|e| e.record_review(&id, &req.hit_id, req.verdict).cloned())?,
    ))
}

async fn revoke_worker(
    State(state): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    payload: Result<Json<RevokeRequest>, JsonRejection>,
) -> ApiResult<WorkerProfile> {
    caller.require(&[Role::Admin])?;
    let req = body(payload)?;
    let reason = if req.reason.is_empty() { "revoked by admin".to_owned() } else { req.reason };
    Ok(V1::new(state.engine().write(|e| e.revoke_worker(&id, &reason).cloned())?))
}

async fn load_passages(
    State(state): State<AppState>,
    caller: Caller,
    payload: Result<Json<LoadPassagesRequest>, JsonRejection>,
) -> ApiResult<LoadPassagesResponse> {
    caller.require(&[Role::Admin])?;
    let req = body(payload)?;
    let loaded = state.engine().write(|e| e.load_passages(req.split, req.passages))?;
    Ok(V1::new(LoadPassagesResponse { loaded }))
}

async fn get_question(State(state): State<AppState>, caller: Caller, Path(id): Path<String>) -> ApiResult<QuestionRecord> {
    caller.require(&[Role::Admin])?;
    state
        .engine()
        .read(|e| e.question_record(&id).cloned())
        .map(V1::new)
        .ok_or_else(|| not_found("question", &id))
}

async fn tag_labels(
    State(state): State<AppState>,
    caller: Caller,
    Path(id): Path<String>,
    payload: Result<Json<LabelsRequest>, JsonRejection>,
) -> ApiResult<QuestionRecord> {
    caller.require(&[Role::Admin])?;
    let req = body(payload)?;
    let labels: Vec<ComprehensionLabel> =
        parse_labels(&req.labels).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_labels", e.to_string()))?;
    Ok(V1::new(state.engine().write(|e| e.tag_labels(&id, labels).cloned())?))
}

async fn answerability(
    State(state): State<AppState>,
    caller: Caller,
    payload: Result<Json<AnswerabilityRequest>, JsonRejection>,
) -> ApiResult<ValidationReport> {
    caller.require(&[Role::Admin])?;
    let req = body(payload)?;
    let policy = state.0.policy;
    Ok(V1::new(state.engine().write(|e| e.run_answerability(req.split, &policy))?))
}

fn valid_export_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.') && !name.starts_with('.')
}

async fn export(
    State(state): State<AppState>,
    caller: Caller,
    payload: Result<Json<ExportRequestBody>, JsonRejection>,
) -> ApiResult<ExportResponse> {
    caller.require(&[Role::Admin])?;
    let req = body(payload)?;
    if !valid_export_name(&req.name) {
        return Err(ApiError::bad_request("export names may use letters, digits, '-', '_' and '.'"));
    }
    let request = ExportRequest {
        name: req.name.clone(),
        splits: req.splits,
        adversary_id: req.adversary_id,
    };
    let bundle = state.engine().read(|e| export_dataset(e.state(), &request))?;
    let dir = state.0.export_dir.join(&req.name);
    let written = bundle.write_to(&dir)?;
    Ok(V1::new(ExportResponse {
        manifest: bundle.manifest,
        files: written.iter().map(|p| p.display().to_string()).collect(),
    }))
}
