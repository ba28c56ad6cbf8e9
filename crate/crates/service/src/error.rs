use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use positioner_analysis::AnalysisError;
use positioner_core::{BackendError, KinematicsError, PlanError, SourceError, StoreError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("busy: {0}")]
    Busy(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("illegal state transition: {0}")]
    State(String),
    #[error("hardware fault: {0}")]
    Hardware(String),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("service is shutting down")]
    Unavailable,
}

/// JSON body of every error response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl ServiceError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Busy(_) => "busy",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Config(_) => "config",
            ServiceError::Range(_) => "range",
            ServiceError::State(_) => "state",
            ServiceError::Hardware(_) => "hardware_fault",
            ServiceError::Storage(_) => "storage",
            ServiceError::Unavailable => "unavailable",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Busy(_) | ServiceError::Conflict(_) | ServiceError::State(_) => {
                StatusCode::CONFLICT
            }
            ServiceError::Config(_) | ServiceError::Range(_) => StatusCode::BAD_REQUEST,
            ServiceError::Hardware(_) | ServiceError::Storage(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            ServiceError::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.kind().into(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Conflict(id) => {
                ServiceError::Conflict(format!("run '{id}' already exists"))
            }
            StoreError::NotFound(id) => ServiceError::NotFound(id),
            StoreError::Invalid(m) => ServiceError::Config(m),
            other => ServiceError::Storage(other.to_string()),
        }
    }
}

impl From<PlanError> for ServiceError {
    fn from(e: PlanError) -> Self {
        ServiceError::Config(e.to_string())
    }
}

impl From<SourceError> for ServiceError {
    fn from(e: SourceError) -> Self {
        ServiceError::Config(e.to_string())
    }
}

impl From<KinematicsError> for ServiceError {
    fn from(e: KinematicsError) -> Self {
        ServiceError::Range(e.to_string())
    }
}

impl From<BackendError> for ServiceError {
    fn from(e: BackendError) -> Self {
        ServiceError::Hardware(e.to_string())
    }
}

impl From<AnalysisError> for ServiceError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Range(m) => ServiceError::Range(m),
            AnalysisError::Store(s) => s.into(),
            other => ServiceError::Config(other.to_string()),
        }
    }
}
