//! Shared domain vocabulary: identifiers, time, policy, and the application
//! and job state machines. Everything here is plain data and pure functions.

mod application;
mod audit;
mod ids;
mod time;
mod types;

pub use application::{
    next_state, transition_application, validate_registration, AppState, Applicant, Application,
    Event, EventKind, RegistrationForm,
};
pub use audit::{ActionKind, AuditEvent, SentinelAction};
pub use ids::{AccessToken, AppId, BlockId, JobId, NodeId};
pub use time::{
    hours, period_status, Clock, ManualClock, Period, PeriodStatus, SystemClock, Timestamp,
};
pub use types::{
    validate_tiers, ArchiveRef, Block, Job, JobResult, JobState, NodeRecord, NodeSpecClass, Policy,
    PowerState,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("required field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("node count must be positive, got {0}")]
    NonPositiveNodeCount(i64),
    #[error("event {event} is not allowed in state {from}")]
    IllegalTransition { from: AppState, event: EventKind },
    #[error("period of {requested_ms} ms exceeds the {max_hours} h limit")]
    PeriodTooLong { requested_ms: i64, max_hours: u32 },
    #[error("{requested} nodes is outside the allowed range {min}..={max}")]
    NodeCountOutOfPolicy { requested: u32, min: u32, max: u32 },
    #[error("bad assignment: {0}")]
    BadAssignment(String),
    #[error("invalid period: start {start} is not before end {end}")]
    InvalidPeriod { start: Timestamp, end: Timestamp },
    #[error("job {job} is {state:?}")]
    WrongJobState { job: JobId, state: JobState },
    #[error("invalid policy: {0}")]
    BadPolicy(String),
    #[error("invalid tier: {0}")]
    BadTier(String),
}
