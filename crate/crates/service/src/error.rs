use std::sync::atomic::{AtomicU64, Ordering};

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

/// Wire form of every error response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub field: Option<String>,
    /// Correlates an internal failure with the server log.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ApiError {
    Invalid { field: Option<String>, message: String },
    NotFound(String),
    NotLoaded,
    Forbidden(String),
    Internal(String),
}

static INCIDENTS: AtomicU64 = AtomicU64::new(1);

impl ApiError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError::Invalid {
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Invalid { .. } => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::NotLoaded => StatusCode::CONFLICT,
            ApiError::Forbidden(_) => StatusCode::FORBIDDEN,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn body(self) -> ErrorBody {
        let (code, message, field, id) = match self {
            ApiError::Invalid { field, message } => ("invalid_request", message, field, None),
            ApiError::NotFound(m) => ("not_found", m, None, None),
            ApiError::NotLoaded => ("model_not_loaded", "no checkpoint is loaded".to_string(), None, None),
            ApiError::Forbidden(m) => ("forbidden", m, None, None),
            ApiError::Internal(detail) => {
                let id = format!("{:016x}", INCIDENTS.fetch_add(1, Ordering::Relaxed));
                log::error!("internal error {id}: {detail}");
                ("internal", "internal server error".to_string(), None, Some(id))
            }
        };
        ErrorBody {
            code: code.into(),
            message,
            field,
            id,
        }
    }
}

impl From<omtsam_core::Error> for ApiError {
    fn from(e: omtsam_core::Error) -> Self {
        match e {
            omtsam_core::Error::Validation { field, message } => ApiError::Invalid {
                field: Some(field),
                message,
            },
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        (status, Json(self.body())).into_response()
    }
}
