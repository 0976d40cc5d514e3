use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

/// An HTTP error with a machine-readable code and a human hint.
#[derive(Debug, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub hint: Option<String>,
}

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    hint: Option<&'a str>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), hint: None }
    }

    pub fn with_hint(mut self, hint: impl Into<String>) -> Self {
        self.hint = Some(hint.into());
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    pub fn conflict(current: u64, expected: u64) -> Self {
        Self::new(StatusCode::CONFLICT, "revision_conflict", format!("If-Match names revision {expected}, session is at {current}"))
            .with_hint("re-fetch the session and retry against the current revision")
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_layer", message)
    }

    pub fn too_large(message: impl Into<String>) -> Self {
        Self::new(StatusCode::PAYLOAD_TOO_LARGE, "image_too_large", message)
    }

    pub fn no_checkpoint() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "no_checkpoint", "no trained checkpoint is loaded")
            .with_hint("train one with `layered train --out model.ckpt` and restart with `--checkpoint model.ckpt`")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<layered_core::Error> for ApiError {
    fn from(e: layered_core::Error) -> Self {
        use layered_core::Error as E;
        match e {
            E::Image(_) => ApiError::bad_request(format!("undecodable image: {e}")),
            E::LayerOutOfBounds(_) | E::MultipleSpatialLayers(_) | E::ShapeMismatch { .. } | E::InvalidArgument(_) => {
                ApiError::unprocessable(e.to_string())
            }
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<layered_dit::DitError> for ApiError {
    fn from(e: layered_dit::DitError) -> Self {
        ApiError::internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body { error: self.code, message: &self.message, hint: self.hint.as_deref() };
        (self.status, Json(body)).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
