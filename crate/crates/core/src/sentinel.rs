//! The automatic control loop. Each tick samples every powered node, shuts
//! down nodes above the temperature threshold, settles finished jobs and
//! expires blocks whose usage period is over.
//!
//! Every action is written to the audit stream (and the optional action log
//! file) before it is carried out.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::domain::{ActionKind, SentinelAction};
pub use crate::fleet::TelemetrySample;

use crate::allocator::{release_in, AllocError};
use crate::domain::{
    period_status, transition_application, AppId, AppState, Application, AuditEvent, Block, Clock,
    DomainError, Event, Job, JobId, JobResult, JobState, NodeId, PeriodStatus, Policy, PowerState,
    Timestamp,
};
use crate::fleet::{Caller, Fleet, JobHandle, JobOutcome, JobProgress};
use crate::store::{RecordKind, Store, StoreError, Stream};

/// Consecutive failed reads after which a node's data is reported stale.
pub const STALE_AFTER_MISSED_TICKS: u32 = 2;

/// Exit status recorded for jobs cut off by the end of their period.
pub const EXPIRED_EXIT_CODE: i32 = 137;

#[derive(Debug, thiserror::Error)]
pub enum SentinelError {
    #[error("unknown application {0}")]
    UnknownApplication(AppId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("action log: {0}")]
    ActionLog(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Who asks for a usage report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Viewer {
    Admin,
    Tenant(AppId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub app_id: AppId,
    pub samples: BTreeMap<NodeId, Vec<TelemetrySample>>,
    pub actions: Vec<SentinelAction>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeHealth {
    pub last_sample: Option<TelemetrySample>,
    pub missed_ticks: u32,
}

impl NodeHealth {
    pub fn is_stale(&self) -> bool {
        self.missed_ticks >= STALE_AFTER_MISSED_TICKS
    }
}

#[derive(Default)]
struct Health {
    nodes: BTreeMap<NodeId, NodeHealth>,
    last_tick: Option<Timestamp>,
}

pub struct Sentinel {
    store: Arc<Store>,
    fleet: Arc<Fleet>,
    policy: Policy,
    caller: Caller,
    action_log: Option<PathBuf>,
    busy: Mutex<()>,
    health: Mutex<Health>,
}

impl std::fmt::Debug for Sentinel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sentinel")
            .field("policy", &self.policy)
            .finish_non_exhaustive()
    }
}

impl Sentinel {
    /// `identity` is the key the sentinel presents on the node channel.
    pub fn new(
        store: Arc<Store>,
        fleet: Arc<Fleet>,
        policy: Policy,
        identity: impl Into<String>,
        action_log: Option<PathBuf>,
    ) -> Self {
        Sentinel {
            store,
            fleet,
            policy,
            caller: Caller::new(identity),
            action_log,
            busy: Mutex::new(()),
            health: Mutex::new(Health::default()),
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn node_health(&self, node: &NodeId) -> NodeHealth {
        self.health
            .lock()
            .nodes
            .get(node)
            .cloned()
            .unwrap_or_default()
    }

    /// Runs one iteration. If another tick is still executing, this one is
    /// skipped and returns no actions.
    pub fn tick(&self, now: Timestamp) -> Result<Vec<SentinelAction>, SentinelError> {
        let Some(_guard) = self.busy.try_lock() else {
            tracing::warn!("previous sentinel tick still running; skipping");
            return Ok(Vec::new());
        };
        let now = {
            let mut h = self.health.lock();
            let now = h.last_tick.map_or(now, |t| t.max(now));
            h.last_tick = Some(now);
            now
        };

        self.settle_jobs(now)?;
        let mut actions = Vec::new();
        for sample in self.sample(now)? {
            if sample.temperature_c > self.policy.temp_threshold_c {
                actions.push(self.shutdown_hot_node(&sample, now)?);
            }
        }
        for app in self.store.list::<Application>(RecordKind::Application)? {
            if app.state != AppState::Active {
                continue;
            }
            let Some(period) = app.period else { continue };
            if period_status(period.start, period.end, now)? == PeriodStatus::Over {
                actions.push(self.expire(&app, now)?);
            }
        }
        Ok(actions)
    }

    /// Reads every powered node concurrently and appends the samples.
    fn sample(&self, now: Timestamp) -> Result<Vec<TelemetrySample>, SentinelError> {
        let on: Vec<NodeId> = self
            .fleet
            .views()
            .into_iter()
            .filter(|v| v.power == PowerState::On)
            .map(|v| v.node_id)
            .collect();
        let reads: Vec<_> = std::thread::scope(|s| {
            let hs: Vec<_> = on
                .iter()
                .map(|id| s.spawn(move || self.fleet.read_sensors(id)))
                .collect();
            hs.into_iter()
                .map(|h| h.join().expect("sensor worker panicked"))
                .collect()
        });
        let mut samples = Vec::new();
        for (id, read) in on.iter().zip(reads) {
            match read {
                Ok(mut sample) => {
                    sample.timestamp = now;
                    self.store.append_event(Stream::Telemetry, &sample)?;
                    let mut h = self.health.lock();
                    h.nodes.insert(
                        id.clone(),
                        NodeHealth {
                            last_sample: Some(sample.clone()),
                            missed_ticks: 0,
                        },
                    );
                    samples.push(sample);
                }
                Err(e) => {
                    tracing::warn!(node = %id, error = %e, "sensor read failed");
                    self.health
                        .lock()
                        .nodes
                        .entry(id.clone())
                        .or_default()
                        .missed_ticks += 1;
                }
            }
        }
        Ok(samples)
    }

    fn write_ahead(
        &self,
        action: &SentinelAction,
        app_id: Option<AppId>,
    ) -> Result<(), SentinelError> {
        self.store.append_event(
            Stream::Audit,
            &AuditEvent::Sentinel {
                app_id,
                action: action.clone(),
            },
        )?;
        if let Some(path) = &self.action_log {
            let mut line = serde_json::to_vec(action).expect("actions serialize");
            line.push(b'\n');
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(&line)?;
            f.sync_data()?;
        }
        Ok(())
    }

    fn owner_app(&self, node: &NodeId) -> Result<Option<(Block, AppId)>, SentinelError> {
        let blocks: Vec<Block> = self.store.list(RecordKind::Block)?;
        Ok(blocks
            .into_iter()
            .find(|b| b.is_active() && b.contains(node))
            .map(|b| {
                let app = b.app_id.clone();
                (b, app)
            }))
    }

    fn shutdown_hot_node(
        &self,
        sample: &TelemetrySample,
        now: Timestamp,
    ) -> Result<SentinelAction, SentinelError> {
        let action = SentinelAction {
            kind: ActionKind::ThresholdShutdown {
                node: sample.node_id.clone(),
            },
            at: now,
            cause: format!(
                "temperature {:.1} °C above threshold {:.1} °C",
                sample.temperature_c, self.policy.temp_threshold_c
            ),
        };
        let owner = self.owner_app(&sample.node_id)?;
        self.write_ahead(&action, owner.as_ref().map(|(_, a)| a.clone()))?;
        let caller = match &owner {
            Some((_, app)) => self.caller.on_behalf_of(app),
            None => self.caller.clone(),
        };
        if let Err(e) = self
            .fleet
            .set_power(&caller, &sample.node_id, PowerState::Off)
        {
            tracing::error!(node = %sample.node_id, error = %e, "threshold shutdown failed");
        }
        tracing::warn!(node = %sample.node_id, temp = sample.temperature_c, "threshold shutdown");
        Ok(action)
    }

    /// Ends an application whose period is over: kills its jobs, powers the
    /// block off, releases it and moves the application to `Expired`.
    fn expire(&self, app: &Application, now: Timestamp) -> Result<SentinelAction, SentinelError> {
        let block_id = app
            .block_id
            .clone()
            .expect("active applications hold a block");
        let block: Block = self
            .store
            .get(RecordKind::Block, block_id.as_str())?
            .ok_or_else(|| AllocError::UnknownBlock(block_id.clone()))?;
        let end = app.period.map(|p| p.end).unwrap_or(now);
        let action = SentinelAction {
            kind: ActionKind::BlockExpired {
                block: block_id.clone(),
            },
            at: now,
            cause: format!("usage period ended at {end}"),
        };
        self.write_ahead(&action, Some(app.app_id.clone()))?;

        let caller = self.caller.on_behalf_of(&app.app_id);
        let running: Vec<Job> = self
            .store
            .list::<Job>(RecordKind::Job)?
            .into_iter()
            .filter(|j| j.app_id == app.app_id && j.state == JobState::Running)
            .collect();
        for job in &running {
            self.fleet
                .kill_job(&caller, &JobHandle::new(&block, &job.job_id));
        }
        for node in &block.node_ids {
            if let Err(e) = self.fleet.set_power(&caller, node, PowerState::Off) {
                tracing::error!(node = %node, error = %e, "power-off at expiry failed");
            }
        }
        for job in &running {
            let handle = JobHandle::new(&block, &job.job_id);
            let artifact = match self.fleet.poll_job(&caller, &handle) {
                Ok(JobProgress::Done(JobOutcome { artifact, .. })) => artifact,
                _ => Vec::new(),
            };
            self.store.put_artifact(job.job_id.as_str(), &artifact)?;
        }

        let policy = &self.policy;
        let failed = self.store.transact(|txn| {
            let Some(current) =
                txn.get::<Application>(RecordKind::Application, app.app_id.as_str())?
            else {
                return Err(SentinelError::UnknownApplication(app.app_id.clone()));
            };
            if current.state != AppState::Active {
                return Ok(Vec::new());
            }
            let mut failed = Vec::new();
            for job in &running {
                let Some(mut j) = txn.get::<Job>(RecordKind::Job, job.job_id.as_str())? else {
                    continue;
                };
                if j.state != JobState::Running {
                    continue;
                }
                let artifact = self
                    .store
                    .get_artifact(j.job_id.as_str())
                    .unwrap_or_default();
                j.complete(
                    JobResult {
                        exit_code: EXPIRED_EXIT_CODE,
                        artifact_len: artifact.len() as u64,
                        artifact_sha256: hex::encode(Sha256::digest(&artifact)),
                        diagnostic: Some("period expired".into()),
                    },
                    now,
                )?;
                txn.put(RecordKind::Job, j.job_id.as_str(), &j)?;
                failed.push(j.job_id);
            }
            release_in(txn, &block_id, now)?;
            let next = transition_application(&current, Event::Expire, policy)?;
            txn.put(RecordKind::Application, app.app_id.as_str(), &next)?;
            Ok::<_, SentinelError>(failed)
        })?;
        for job_id in failed {
            self.store.append_event(
                Stream::Audit,
                &AuditEvent::Job {
                    job_id,
                    app_id: app.app_id.clone(),
                    from: Some(JobState::Running),
                    to: JobState::Failed,
                    at: now,
                },
            )?;
        }
        self.store.append_event(
            Stream::Audit,
            &AuditEvent::Application {
                app_id: app.app_id.clone(),
                from: Some(AppState::Active),
                to: AppState::Expired,
                at: now,
            },
        )?;
        tracing::info!(app = %app.app_id, block = %block_id, "block expired");
        Ok(action)
    }

    fn settle_jobs(&self, now: Timestamp) -> Result<(), SentinelError> {
        let jobs: Vec<Job> = self.store.list(RecordKind::Job)?;
        for job in jobs.into_iter().filter(|j| j.state == JobState::Running) {
            self.reconcile_job(&job.job_id, now)?;
        }
        Ok(())
    }

    /// Brings a running job's record up to date with the fleet. Once all
    /// ranks have stopped, stores the result artifact and marks the job
    /// `Finished` or `Failed`.
    pub fn reconcile_job(&self, job_id: &JobId, now: Timestamp) -> Result<Job, SentinelError> {
        let job: Job = self
            .store
            .get(RecordKind::Job, job_id.as_str())?
            .ok_or_else(|| SentinelError::UnknownJob(job_id.clone()))?;
        if job.state != JobState::Running {
            return Ok(job);
        }
        let block: Block = self
            .store
            .get(RecordKind::Block, job.block_id.as_str())?
            .ok_or_else(|| AllocError::UnknownBlock(job.block_id.clone()))?;
        let caller = self.caller.on_behalf_of(&job.app_id);
        let outcome = match self
            .fleet
            .poll_job(&caller, &JobHandle::new(&block, job_id))
        {
            Ok(JobProgress::Running) => return Ok(job),
            Ok(JobProgress::Done(o)) => o,
            Err(e) => JobOutcome {
                exit_code: 255,
                artifact: Vec::new(),
                diagnostic: Some(e.to_string()),
            },
        };
        self.store
            .put_artifact(job_id.as_str(), &outcome.artifact)?;
        let result = JobResult {
            exit_code: outcome.exit_code,
            artifact_len: outcome.artifact.len() as u64,
            artifact_sha256: hex::encode(Sha256::digest(&outcome.artifact)),
            diagnostic: outcome.diagnostic,
        };
        let (job, changed) = self.store.transact(|txn| {
            let mut j: Job = txn
                .get(RecordKind::Job, job_id.as_str())?
                .ok_or_else(|| SentinelError::UnknownJob(job_id.clone()))?;
            if j.state != JobState::Running {
                return Ok((j, false));
            }
            j.complete(result.clone(), now)?;
            txn.put(RecordKind::Job, job_id.as_str(), &j)?;
            Ok::<_, SentinelError>((j, true))
        })?;
        if changed {
            self.store.append_event(
                Stream::Audit,
                &AuditEvent::Job {
                    job_id: job.job_id.clone(),
                    app_id: job.app_id.clone(),
                    from: Some(JobState::Running),
                    to: job.state,
                    at: now,
                },
            )?;
        }
        Ok(job)
    }

    /// Samples taken on the application's block nodes while it held them,
    /// and the automatic actions that concerned it.
    pub fn usage_report(
        &self,
        app_id: &AppId,
        viewer: &Viewer,
    ) -> Result<UsageReport, SentinelError> {
        if let Viewer::Tenant(own) = viewer {
            if own != app_id {
                return Err(SentinelError::UnknownApplication(app_id.clone()));
            }
        }
        let app: Application = self
            .store
            .get(RecordKind::Application, app_id.as_str())?
            .ok_or_else(|| SentinelError::UnknownApplication(app_id.clone()))?;
        let block: Option<Block> = match &app.block_id {
            Some(b) => self.store.get(RecordKind::Block, b.as_str())?,
            None => None,
        };
        let mut samples: BTreeMap<NodeId, Vec<TelemetrySample>> = BTreeMap::new();
        if let Some(block) = &block {
            for n in &block.node_ids {
                samples.insert(n.clone(), Vec::new());
            }
            let from = block.period.start;
            let until = block.released_at.unwrap_or(Timestamp(i64::MAX));
            for entry in self.store.read_stream(Stream::Telemetry)? {
                let Ok(s) = serde_json::from_value::<TelemetrySample>(entry.payload) else {
                    continue;
                };
                if s.timestamp >= from && s.timestamp <= until {
                    if let Some(series) = samples.get_mut(&s.node_id) {
                        series.push(s);
                    }
                }
            }
        }
        let actions = self
            .store
            .read_stream(Stream::Audit)?
            .into_iter()
            .filter_map(|e| serde_json::from_value::<AuditEvent>(e.payload).ok())
            .filter_map(|e| match e {
                AuditEvent::Sentinel {
                    app_id: Some(a),
                    action,
                } if a == *app_id => Some(action),
                _ => None,
            })
            .collect();
        Ok(UsageReport {
            app_id: app_id.clone(),
            samples,
            actions,
        })
    }

    /// Ticks every `sentinel_tick_seconds` on a background thread until
    /// `stop` is set.
    pub fn spawn_loop(
        self: &Arc<Self>,
        clock: Arc<dyn Clock>,
        stop: Arc<AtomicBool>,
    ) -> JoinHandle<()> {
        let me = Arc::clone(self);
        let period = Duration::from_secs(u64::from(self.policy.sentinel_tick_seconds));
        std::thread::spawn(move || {
            let step = Duration::from_millis(50);
            'outer: loop {
                let mut waited = Duration::ZERO;
                while waited < period {
                    if stop.load(Ordering::Relaxed) {
                        break 'outer;
                    }
                    std::thread::sleep(step);
                    waited += step;
                }
                match me.tick(clock.now()) {
                    Ok(actions) if !actions.is_empty() => {
                        tracing::info!(count = actions.len(), "sentinel actions")
                    }
                    Ok(_) => {}
                    Err(e) => tracing::error!(error = %e, "sentinel tick failed"),
                }
            }
        })
    }
}
