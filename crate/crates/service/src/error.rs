use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use latentsteer_core::pipeline::FieldError;
use latentsteer_core::Error as CoreError;
use serde_json::json;

#[derive(Debug, Clone, PartialEq)]
pub enum ApiError {
    NotFound(String),
    /// 422 with one entry per offending field.
    Invalid(Vec<FieldError>),
    /// 409: the request is not legal in the job's current phase.
    Conflict(String),
    BadGateway(String),
    Unavailable(String),
    Internal(String),
}

impl ApiError {
    pub fn field(field: &str, message: impl Into<String>) -> Self {
        ApiError::Invalid(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::BadGateway(_) => StatusCode::BAD_GATEWAY,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn message(&self) -> String {
        match self {
            ApiError::Invalid(fields) => fields
                .iter()
                .map(|f| format!("{}: {}", f.field, f.message))
                .collect::<Vec<_>>()
                .join("; "),
            ApiError::NotFound(m)
            | ApiError::Conflict(m)
            | ApiError::BadGateway(m)
            | ApiError::Unavailable(m)
            | ApiError::Internal(m) => m.clone(),
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.status().as_u16(), self.message())
    }
}

impl std::error::Error for ApiError {}

/// Splits a `field: message; field: message` config error back into
/// field errors.
fn parse_config_message(msg: &str) -> Vec<FieldError> {
    msg.split("; ")
        .map(|part| match part.split_once(": ") {
            Some((field, message)) if !field.contains(' ') => FieldError {
                field: field.into(),
                message: message.into(),
            },
            _ => FieldError {
                field: "config".into(),
                message: part.into(),
            },
        })
        .collect()
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(msg) => ApiError::Invalid(parse_config_message(&msg)),
            CoreError::Contract(_) | CoreError::InvalidCodebook(_) | CoreError::DegenerateWeights => {
                ApiError::field("config", e.to_string())
            }
            CoreError::Image(_) => ApiError::field("image", e.to_string()),
            CoreError::Json(_) => ApiError::field("body", e.to_string()),
            CoreError::IllegalTransition { .. } | CoreError::IncompatibleCheckpoint(_) => {
                ApiError::Conflict(e.to_string())
            }
            CoreError::Backend(_) | CoreError::Protocol { .. } => ApiError::BadGateway(e.to_string()),
            CoreError::Diverged { .. } | CoreError::Io(_) => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({
            "error": self.status().canonical_reason().unwrap_or("error"),
            "message": self.message(),
        });
        if let ApiError::Invalid(fields) = &self {
            body["fields"] = json!(fields);
        }
        (self.status(), Json(body)).into_response()
    }
}
