use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use concept_canvas::Error;
use serde_json::{json, Value};

/// Every error body has the shape `{code, message, details}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            details: Value::Null,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn unauthorized() -> Self {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    /// 400 for a body that fails to parse, naming the field when serde does.
    pub fn bad_body(err: &serde_json::Error) -> Self {
        let msg = err.to_string();
        let field = msg.split('`').nth(1).map(str::to_string);
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", msg).with_details(json!({ "field": field }))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Error::Busy(_) => (StatusCode::CONFLICT, "busy"),
            Error::Selection(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_selection"),
            Error::CorruptManifest { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "corrupt_manifest"),
            e if e.is_user_error() => (StatusCode::BAD_REQUEST, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}: {}", self.code, self.message);
        }
        let body = json!({"code": self.code, "message": self.message, "details": self.details});
        (self.status, Json(body)).into_response()
    }
}
