//! Wire errors and the `v1` response envelope.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use advqa_core::adversary::AdversaryError;
use advqa_core::engine::EngineError;
use advqa_core::store::StoreError;

pub const API_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub retryable: bool,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_owned(),
            message: message.into(),
            retryable: false,
            status: status.as_u16(),
        }
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or unknown bearer token")
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn status(&self) -> StatusCode {
        StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
    }
}

/// Wire code and HTTP status of an engine error. Every variant has its own code.
pub fn engine_error_code(e: &EngineError) -> (&'static str, StatusCode) {
    use EngineError::*;
    match e {
        NotQualified(_) => ("not_qualified", StatusCode::FORBIDDEN),
        NoPassagesLeft { .. } => ("no_passages_left", StatusCode::CONFLICT),
        SpanOutOfBounds { .. } => ("span_out_of_bounds", StatusCode::UNPROCESSABLE_ENTITY),
        HitClosed(_) => ("hit_closed", StatusCode::CONFLICT),
        HitFull { .. } => ("hit_full", StatusCode::CONFLICT),
        ReviewOfForeignHit { .. } => ("review_of_foreign_hit", StatusCode::UNPROCESSABLE_ENTITY),
        AlreadyReviewed(_) => ("already_reviewed", StatusCode::CONFLICT),
        InsufficientValidations(_) => ("insufficient_validations", StatusCode::CONFLICT),
        IncompleteTraining(_) => ("incomplete_training", StatusCode::UNPROCESSABLE_ENTITY),
        Ineligible { .. } => ("ineligible", StatusCode::FORBIDDEN),
        SelfValidation { .. } => ("self_validation", StatusCode::FORBIDDEN),
        DuplicateValidation { .. } => ("duplicate_validation", StatusCode::CONFLICT),
        IllegalTransition(_) => ("illegal_transition", StatusCode::CONFLICT),
        InvalidInput(_) => ("invalid_input", StatusCode::BAD_REQUEST),
        NotFound { .. } => ("not_found", StatusCode::NOT_FOUND),
        AlreadyExists { .. } => ("already_exists", StatusCode::CONFLICT),
        Adversary(a) => match a {
            AdversaryError::InvalidInput(_) => ("adversary_invalid_input", StatusCode::BAD_REQUEST),
            AdversaryError::RemoteUnavailable { .. } => ("adversary_unavailable", StatusCode::SERVICE_UNAVAILABLE),
            AdversaryError::MalformedResponse(_) => ("adversary_malformed_response", StatusCode::BAD_GATEWAY),
            AdversaryError::Misconfigured(_) => ("adversary_misconfigured", StatusCode::INTERNAL_SERVER_ERROR),
        },
        Log(_) => ("event_log_failure", StatusCode::INTERNAL_SERVER_ERROR),
        InconsistentLog { .. } => ("inconsistent_log", StatusCode::INTERNAL_SERVER_ERROR),
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let (code, status) = engine_error_code(&e);
        Self {
            code: code.to_owned(),
            message: e.to_string(),
            retryable: e.is_retryable(),
            status: status.as_u16(),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (code, status) = match &e {
            StoreError::UnvalidatedDevTest { .. } => ("unvalidated_dev_test", StatusCode::CONFLICT),
            StoreError::Io { .. } => ("store_io", StatusCode::INTERNAL_SERVER_ERROR),
            _ => ("invalid_dataset", StatusCode::UNPROCESSABLE_ENTITY),
        };
        Self::new(status, code, e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    version: &'static str,
    error: &'a ApiError,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(ErrorBody {
            version: API_VERSION,
            error: &self,
        });
        (self.status(), body).into_response()
    }
}

/// Successful `v1` response: `{"version": "v1", "data": ...}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct V1<T> {
    pub version: String,
    pub data: T,
}

impl<T> V1<T> {
    pub fn new(data: T) -> Self {
        Self {
            version: API_VERSION.to_owned(),
            data,
        }
    }
}

impl<T: Serialize> IntoResponse for V1<T> {
    fn into_response(self) -> Response {
        Json(self).into_response()
    }
}

pub type ApiResult<T> = Result<V1<T>, ApiError>;
