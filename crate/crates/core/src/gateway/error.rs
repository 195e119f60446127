use serde::{Deserialize, Serialize};

use crate::allocator::AllocError;
use crate::domain::DomainError;
use crate::fleet::FleetError;
use crate::sentinel::SentinelError;
use crate::store::StoreError;

/// Error returned by every gateway operation: a stable machine code, a
/// human message and the HTTP status it maps to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code} ({http_status}): {message}")]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub http_status: u16,
}

impl ApiError {
    pub fn new(http_status: u16, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            code: code.to_owned(),
            message: message.into(),
            http_status,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(400, "BadRequest", message)
    }

    pub fn bad_credential() -> Self {
        ApiError::new(401, "BadCredential", "admin credential missing or wrong")
    }

    pub fn invalid_token() -> Self {
        ApiError::new(
            401,
            "InvalidToken",
            "access token missing, unknown or revoked",
        )
    }

    pub fn unknown_application(id: impl std::fmt::Display) -> Self {
        ApiError::new(404, "UnknownApplication", format!("no application {id}"))
    }

    pub fn unknown_job(id: impl std::fmt::Display) -> Self {
        ApiError::new(404, "UnknownJob", format!("no job {id}"))
    }

    pub fn not_active() -> Self {
        ApiError::new(409, "NotActive", "the application has no active block")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(500, "Internal", message)
    }
}

impl From<DomainError> for ApiError {
    fn from(e: DomainError) -> Self {
        let msg = e.to_string();
        match e {
            DomainError::EmptyField(_) => ApiError::new(400, "EmptyField", msg),
            DomainError::NonPositiveNodeCount(_) => ApiError::new(400, "NonPositiveNodeCount", msg),
            DomainError::InvalidPeriod { .. } => ApiError::new(400, "InvalidPeriod", msg),
            DomainError::IllegalTransition { .. } => ApiError::new(409, "IllegalTransition", msg),
            DomainError::PeriodTooLong { .. } => ApiError::new(409, "PeriodTooLong", msg),
            DomainError::NodeCountOutOfPolicy { .. } => {
                ApiError::new(409, "NodeCountOutOfPolicy", msg)
            }
            DomainError::BadAssignment(_) => ApiError::new(409, "BadAssignment", msg),
            DomainError::WrongJobState { .. } => ApiError::new(409, "WrongJobState", msg),
            DomainError::BadPolicy(_) | DomainError::BadTier(_) => ApiError::internal(msg),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Conflict => ApiError::new(503, "Busy", "too much contention, retry"),
            other => {
                tracing::error!(error = %other, "store failure");
                ApiError::internal(other.to_string())
            }
        }
    }
}

impl From<AllocError> for ApiError {
    fn from(e: AllocError) -> Self {
        let msg = e.to_string();
        match e {
            AllocError::InsufficientFreeNodes { .. } => {
                ApiError::new(503, "InsufficientFreeNodes", msg)
            }
            AllocError::RaceLost { .. } => ApiError::new(503, "RaceLost", msg),
            AllocError::Store(s) => s.into(),
            _ => ApiError::internal(msg),
        }
    }
}

impl From<FleetError> for ApiError {
    fn from(e: FleetError) -> Self {
        let msg = e.to_string();
        match e {
            FleetError::NodeUnreachable(_) => ApiError::new(503, "NodeUnreachable", msg),
            FleetError::UnknownModule(_) => ApiError::new(400, "UnknownEnvironment", msg),
            FleetError::ArchiveCorrupt(_) => ApiError::new(400, "ArchiveCorrupt", msg),
            _ => ApiError::internal(msg),
        }
    }
}

impl From<SentinelError> for ApiError {
    fn from(e: SentinelError) -> Self {
        match e {
            SentinelError::UnknownApplication(id) => ApiError::unknown_application(id),
            SentinelError::UnknownJob(id) => ApiError::unknown_job(id),
            SentinelError::Store(s) => s.into(),
            SentinelError::Alloc(a) => a.into(),
            SentinelError::Domain(d) => d.into(),
            SentinelError::ActionLog(io) => ApiError::internal(io.to_string()),
        }
    }
}
