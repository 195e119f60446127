use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AccessToken, AppId, BlockId, DomainError, NodeId, Period, Policy, Timestamp};

/// Personal data supplied at registration. Nothing here is verified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Applicant {
    pub name: String,
    pub contact: String,
    pub job_description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationForm {
    #[serde(flatten)]
    pub applicant: Applicant,
    pub nodes_requested: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppState {
    Submitted,
    Approved,
    Rejected,
    Confirmed,
    Active,
    Expired,
    Closed,
}

impl AppState {
    pub const ALL: [AppState; 7] = [
        AppState::Submitted,
        AppState::Approved,
        AppState::Rejected,
        AppState::Confirmed,
        AppState::Active,
        AppState::Expired,
        AppState::Closed,
    ];

    /// States in which an assignment and usage period are attached.
    pub fn holds_assignment(self) -> bool {
        matches!(
            self,
            AppState::Approved
                | AppState::Confirmed
                | AppState::Active
                | AppState::Expired
                | AppState::Closed
        )
    }
}

impl fmt::Display for AppState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Approve {
        assignment: Vec<NodeId>,
        period: Period,
    },
    Reject,
    Confirm,
    Activate,
    Expire,
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Approve,
    Reject,
    Confirm,
    Activate,
    Expire,
    Close,
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self {
            Event::Approve { .. } => EventKind::Approve,
            Event::Reject => EventKind::Reject,
            Event::Confirm => EventKind::Confirm,
            Event::Activate => EventKind::Activate,
            Event::Expire => EventKind::Expire,
            Event::Close => EventKind::Close,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The legal-transition table. `None` means the event is illegal in `from`.
pub fn next_state(from: AppState, event: EventKind) -> Option<AppState> {
    use AppState::*;
    use EventKind as E;
    match (from, event) {
        (Submitted, E::Approve) => Some(Approved),
        (Submitted, E::Reject) => Some(Rejected),
        (Approved, E::Confirm) => Some(Confirmed),
        (Approved, E::Reject) => Some(Rejected),
        (Confirmed, E::Activate) => Some(Active),
        (Active, E::Expire) => Some(Expired),
        (Expired, E::Close) => Some(Closed),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Application {
    pub app_id: AppId,
    pub applicant: Applicant,
    pub nodes_requested: u32,
    pub state: AppState,
    pub assignment: Option<Vec<NodeId>>,
    pub period: Option<Period>,
    pub access_token: Option<AccessToken>,
    pub block_id: Option<BlockId>,
    pub submitted_at: Timestamp,
}

impl Application {
    /// Shifts the usage window to begin at `start`, keeping its length.
    pub fn restart_period(&mut self, start: Timestamp) -> Result<(), DomainError> {
        let period = self.period.ok_or(DomainError::IllegalTransition {
            from: self.state,
            event: EventKind::Confirm,
        })?;
        self.period = Some(Period::starting_at(start, period.length())?);
        Ok(())
    }

    /// Whether the access token still opens anything.
    pub fn token_live(&self) -> bool {
        matches!(
            self.state,
            AppState::Approved | AppState::Confirmed | AppState::Active | AppState::Expired
        )
    }
}

/// Accepts a public registration, producing a fresh `Submitted` application.
pub fn validate_registration(
    form: &RegistrationForm,
    now: Timestamp,
) -> Result<Application, DomainError> {
    let a = &form.applicant;
    for (field, value) in [
        ("name", &a.name),
        ("contact", &a.contact),
        ("job_description", &a.job_description),
    ] {
        if value.trim().is_empty() {
            return Err(DomainError::EmptyField(field));
        }
    }
    if form.nodes_requested <= 0 {
        return Err(DomainError::NonPositiveNodeCount(form.nodes_requested));
    }
    let nodes_requested = u32::try_from(form.nodes_requested)
        .map_err(|_| DomainError::NonPositiveNodeCount(form.nodes_requested))?;
    Ok(Application {
        app_id: AppId::generate(),
        applicant: a.clone(),
        nodes_requested,
        state: AppState::Submitted,
        assignment: None,
        period: None,
        access_token: None,
        block_id: None,
        submitted_at: now,
    })
}

/// Applies one workflow event. Never panics: every (state, event) pair either
/// yields the next application or an error.
pub fn transition_application(
    app: &Application,
    event: Event,
    policy: &Policy,
) -> Result<Application, DomainError> {
    let kind = event.kind();
    let to = next_state(app.state, kind).ok_or(DomainError::IllegalTransition {
        from: app.state,
        event: kind,
    })?;
    let mut next = app.clone();
    next.state = to;
    match event {
        Event::Approve { assignment, period } => {
            if assignment.is_empty() {
                return Err(DomainError::BadAssignment("empty node list".into()));
            }
            let distinct: BTreeSet<&NodeId> = assignment.iter().collect();
            if distinct.len() != assignment.len() {
                return Err(DomainError::BadAssignment(
                    "duplicate node in assignment".into(),
                ));
            }
            Period::new(period.start, period.end)?;
            policy.check_period(&period)?;
            policy.check_node_count(assignment.len() as u32)?;
            next.assignment = Some(assignment);
            next.period = Some(period);
            next.access_token = Some(AccessToken::generate());
        }
        Event::Reject => {
            next.assignment = None;
            next.period = None;
            next.access_token = None;
        }
        Event::Confirm | Event::Activate | Event::Expire | Event::Close => {}
    }
    Ok(next)
}
