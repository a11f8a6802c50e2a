use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use graphal_core::{Error, ErrorClass};
use serde_json::{json, Value};

/// JSON error body `{error_code, message}`, optionally carrying the
/// original result of a request that was already applied.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub original: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            original: None,
        }
    }

    pub fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session with id {id:?}"))
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    pub fn conflict(message: impl Into<String>, original: Value) -> Self {
        Self {
            original: Some(original),
            ..Self::new(StatusCode::CONFLICT, "conflict", message)
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::PoolExhausted | Error::NoPendingQuery => Self::new(StatusCode::CONFLICT, "pool_exhausted", message),
            Error::LabelOutOfRange { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "label_out_of_range", message),
            Error::NodeMismatch { .. } => Self::new(StatusCode::CONFLICT, "node_mismatch", message),
            Error::AlreadyLabeled { .. } => Self::new(StatusCode::CONFLICT, "conflict", message),
            Error::Disconnected { .. } | Error::ZeroDegree { .. } => Self::bad_request(message),
            ref other => match other.class() {
                ErrorClass::Numeric => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "numeric_error", message),
                ErrorClass::Usage | ErrorClass::Data => Self::bad_request(message),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error_code": self.code, "message": self.message });
        if let Some(original) = self.original {
            body["original"] = original;
        }
        (self.status, Json(body)).into_response()
    }
}
