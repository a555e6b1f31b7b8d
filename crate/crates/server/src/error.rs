use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use mobility_core::analytics::AnalyticsError;
use mobility_core::ingest::IngestError;
use mobility_core::privacy::PrivacyError;
use serde::{Deserialize, Serialize};

/// Uniform error body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub detail: serde_json::Value,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                detail: serde_json::Value::Null,
            },
        }
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.body.detail = detail;
        self
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        use serde_json::json;
        let message = e.to_string();
        match e {
            IngestError::NoConsent => Self::new(StatusCode::FORBIDDEN, "no_consent", message),
            IngestError::InvalidEnvelope(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_envelope", message),
            IngestError::TooFewPoints { usable } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "too_few_points", message).with_detail(json!({ "usable": usable }))
            }
            IngestError::UnknownPseudonym(_) | IngestError::UnknownTrip(_) | IngestError::UnknownJob(_) => Self::not_found(message),
            IngestError::JobBusy(id) => Self::new(StatusCode::CONFLICT, "job_busy", message).with_detail(json!({ "job_id": id })),
            IngestError::FeedUnavailable { job_id } => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "feed_unavailable", message).with_detail(json!({ "job_id": job_id }))
            }
            IngestError::Import { line, message } => {
                Self::bad_request("malformed export dump").with_detail(json!({ "line": line, "reason": message }))
            }
            IngestError::Privacy(p) => p.into(),
            IngestError::Store(_) => Self::internal(message),
        }
    }
}

impl From<PrivacyError> for ApiError {
    fn from(e: PrivacyError) -> Self {
        match e {
            // the offending text is not echoed: it may be a raw identifier
            PrivacyError::MalformedPseudonym(_) => Self::bad_request("malformed pseudonym"),
            PrivacyError::EmptyIdentifier => Self::bad_request(e.to_string()),
            PrivacyError::UnknownPseudonym(_) => Self::not_found(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<AnalyticsError> for ApiError {
    fn from(e: AnalyticsError) -> Self {
        match e {
            AnalyticsError::InsufficientHistory { found, required } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "insufficient_history", e.to_string())
                    .with_detail(serde_json::json!({ "found": found, "required": required }))
            }
            AnalyticsError::NoStops => Self::new(StatusCode::SERVICE_UNAVAILABLE, "feed_unavailable", e.to_string()),
            _ => Self::bad_request(e.to_string()),
        }
    }
}
