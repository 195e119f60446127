use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AppId, BlockId, DomainError, JobId, NodeId, Period, Timestamp};

/// Hardware tier of a node. Tiers are ordered by `perf_score`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeSpecClass {
    pub label: String,
    pub perf_score: u32,
    pub mem_mb: u32,
}

/// Checks that every label names a single tier and that perf scores strictly
/// increase along the ordered tier ladder (no two tiers share a score).
pub fn validate_tiers<'a>(
    specs: impl IntoIterator<Item = &'a NodeSpecClass>,
) -> Result<Vec<NodeSpecClass>, DomainError> {
    let mut by_label: BTreeMap<&str, &NodeSpecClass> = BTreeMap::new();
    for spec in specs {
        if spec.perf_score == 0 || spec.mem_mb == 0 {
            return Err(DomainError::BadTier(format!(
                "tier {:?} must have positive perf_score and mem_mb",
                spec.label
            )));
        }
        match by_label.get(spec.label.as_str()) {
            Some(prev) if *prev != spec => {
                return Err(DomainError::BadTier(format!(
                    "tier {:?} declared with conflicting scores",
                    spec.label
                )))
            }
            _ => {
                by_label.insert(&spec.label, spec);
            }
        }
    }
    let mut ladder: Vec<NodeSpecClass> = by_label.into_values().cloned().collect();
    ladder.sort_by_key(|t| t.perf_score);
    if let Some(w) = ladder
        .windows(2)
        .find(|w| w[0].perf_score >= w[1].perf_score)
    {
        return Err(DomainError::BadTier(format!(
            "tiers {:?} and {:?} share perf_score {}",
            w[0].label, w[1].label, w[1].perf_score
        )));
    }
    Ok(ladder)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerState {
    Off,
    On,
}

/// A point-in-time view of one machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: NodeId,
    pub spec: NodeSpecClass,
    pub power: PowerState,
    pub owner: Option<BlockId>,
    pub temperature_c: f64,
    pub load: f64,
}

impl NodeRecord {
    pub fn is_free(&self) -> bool {
        self.owner.is_none()
    }
}

/// Admission limits applied by the administrator and the sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub min_nodes: u32,
    pub max_nodes: u32,
    pub max_period_hours: u32,
    pub temp_threshold_c: f64,
    pub sentinel_tick_seconds: u32,
}

impl Default for Policy {
    /// Two to four nodes per user for under three days.
    fn default() -> Self {
        Policy {
            min_nodes: 2,
            max_nodes: 4,
            max_period_hours: 72,
            temp_threshold_c: 60.0,
            sentinel_tick_seconds: 5,
        }
    }
}

impl Policy {
    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |m: &str| Err(DomainError::BadPolicy(m.to_owned()));
        if self.min_nodes == 0 {
            return bad("min_nodes must be positive");
        }
        if self.min_nodes > self.max_nodes {
            return bad("min_nodes must not exceed max_nodes");
        }
        if self.max_period_hours == 0 {
            return bad("max_period_hours must be positive");
        }
        if !self.temp_threshold_c.is_finite() || self.temp_threshold_c <= 0.0 {
            return bad("temp_threshold_c must be positive");
        }
        if self.sentinel_tick_seconds == 0 {
            return bad("sentinel_tick_seconds must be positive");
        }
        Ok(())
    }

    pub fn check_node_count(&self, count: u32) -> Result<(), DomainError> {
        if count < self.min_nodes || count > self.max_nodes {
            return Err(DomainError::NodeCountOutOfPolicy {
                requested: count,
                min: self.min_nodes,
                max: self.max_nodes,
            });
        }
        Ok(())
    }

    pub fn check_period(&self, period: &Period) -> Result<(), DomainError> {
        let max_ms = i64::from(self.max_period_hours) * 3_600_000;
        let len = period.end.0 - period.start.0;
        if len > max_ms {
            return Err(DomainError::PeriodTooLong {
                requested_ms: len,
                max_hours: self.max_period_hours,
            });
        }
        Ok(())
    }
}

/// An approved, isolated set of nodes. The node list is fixed at creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub block_id: BlockId,
    pub app_id: AppId,
    pub node_ids: Vec<NodeId>,
    pub master_node: NodeId,
    pub period: Period,
    pub released_at: Option<Timestamp>,
}

impl Block {
    pub fn is_active(&self) -> bool {
        self.released_at.is_none()
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.node_ids.contains(node)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Uploaded,
    Running,
    Finished,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Finished | JobState::Failed)
    }
}

/// Size and digest of the uploaded program bundle; the bytes live on the
/// block's master node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveRef {
    pub len: u64,
    pub sha256: String,
}

/// Metadata of a collected result; the bytes live in the artifact store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobResult {
    pub exit_code: i32,
    pub artifact_len: u64,
    pub artifact_sha256: String,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: JobId,
    pub block_id: BlockId,
    pub app_id: AppId,
    pub archive: ArchiveRef,
    pub environment: String,
    pub state: JobState,
    pub result: Option<JobResult>,
    pub uploaded_at: Timestamp,
    pub started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
}

impl Job {
    pub fn start(&mut self, now: Timestamp) -> Result<(), DomainError> {
        if self.state != JobState::Uploaded {
            return Err(DomainError::WrongJobState {
                job: self.job_id.clone(),
                state: self.state,
            });
        }
        self.state = JobState::Running;
        self.started_at = Some(now);
        Ok(())
    }

    /// Moves the job to a terminal state. `Finished` requires exit code 0.
    pub fn complete(&mut self, result: JobResult, now: Timestamp) -> Result<(), DomainError> {
        if self.state.is_terminal() {
            return Err(DomainError::WrongJobState {
                job: self.job_id.clone(),
                state: self.state,
            });
        }
        self.state = if result.exit_code == 0 && result.diagnostic.is_none() {
            JobState::Finished
        } else {
            JobState::Failed
        };
        self.result = Some(result);
        self.finished_at = Some(now);
        Ok(())
    }
}
