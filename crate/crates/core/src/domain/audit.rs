use serde::{Deserialize, Serialize};

use super::{AppId, AppState, BlockId, JobId, JobState, NodeId, Timestamp};

/// What the sentinel did on its own initiative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ActionKind {
    ThresholdShutdown { node: NodeId },
    BlockExpired { block: BlockId },
}

/// One automatic action. Persisted before it is carried out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentinelAction {
    #[serde(flatten)]
    pub kind: ActionKind,
    pub at: Timestamp,
    pub cause: String,
}

/// Entry of the audit stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AuditEvent {
    Application {
        app_id: AppId,
        from: Option<AppState>,
        to: AppState,
        at: Timestamp,
    },
    Job {
        job_id: JobId,
        app_id: AppId,
        from: Option<JobState>,
        to: JobState,
        at: Timestamp,
    },
    Sentinel {
        app_id: Option<AppId>,
        #[serde(flatten)]
        action: SentinelAction,
    },
}

impl AuditEvent {
    /// The application the event concerns, if any.
    pub fn app_id(&self) -> Option<&AppId> {
        match self {
            AuditEvent::Application { app_id, .. } | AuditEvent::Job { app_id, .. } => Some(app_id),
            AuditEvent::Sentinel { app_id, .. } => app_id.as_ref(),
        }
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn action_log_line_shape() {
        let a = SentinelAction {
            kind: ActionKind::ThresholdShutdown { node: "n01".into() },
            at: Timestamp(5_000),
            cause: "too hot".into(),
        };
        assert_eq!(
            serde_json::to_value(&a).unwrap(),
            json!({"kind": "ThresholdShutdown", "node": "n01", "at": 5000, "cause": "too hot"})
        );
        let e = AuditEvent::Sentinel {
            app_id: None,
            action: a.clone(),
        };
        let back: AuditEvent = serde_json::from_value(serde_json::to_value(&e).unwrap()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn transition_round_trip() {
        let e = AuditEvent::Application {
            app_id: "app-1".into(),
            from: Some(AppState::Approved),
            to: AppState::Confirmed,
            at: Timestamp(1),
        };
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["type"], "application");
        assert_eq!(serde_json::from_value::<AuditEvent>(v).unwrap(), e);
    }
}
