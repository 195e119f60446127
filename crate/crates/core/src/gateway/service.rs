//! Workflow logic behind the HTTP surface. Knows the store, the allocator,
//! the fleet and the sentinel; knows nothing about HTTP.

use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ApiError, GatewayConfig};
use crate::allocator::{
    allocate_exhaustive, allocate_ga, ownership, register_inventory, reserve_in, AllocError,
    AllocationRequest, Assignment, GaParams, Inventory, InventoryError,
};
use crate::domain::{
    hours, transition_application, validate_registration, AppId, AppState, Applicant, Application,
    ArchiveRef, AuditEvent, Block, BlockId, Clock, Event, Job, JobId, JobResult, JobState, NodeId,
    NodeRecord, Period, Policy, PowerState, RegistrationForm, Timestamp,
};
use crate::fleet::{
    archive_name, read_job_archive, Caller, CommandEnvelope, Fleet, Manifest, Transfer,
};
use crate::sentinel::{Sentinel, UsageReport, Viewer};
use crate::store::{RecordKind, Store, StoreError, Stream};

#[derive(Debug, thiserror::Error)]
pub enum BootError {
    #[error(transparent)]
    Inventory(#[from] InventoryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Api(#[from] ApiError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub app_id: AppId,
    pub state: AppState,
}

/// Administrator decision on a submitted application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum ReviewDecision {
    Approve {
        node_count: u32,
        period_hours: u32,
        #[serde(default)]
        min_perf_score: u32,
        /// Compute the assignment without recording anything.
        #[serde(default)]
        dry_run: bool,
    },
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewResponse {
    pub app_id: AppId,
    pub state: AppState,
    pub assignment: Option<Vec<NodeId>>,
    pub fitness: Option<f64>,
    pub period: Option<Period>,
    pub access_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfirmResponse {
    pub app_id: AppId,
    pub state: AppState,
    pub block_id: BlockId,
    pub node_ids: Vec<NodeId>,
    pub master_node: NodeId,
    pub period: Period,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: JobId,
    pub app_id: AppId,
    pub state: JobState,
    pub environment: String,
    pub archive_len: u64,
    pub uploaded_at: Timestamp,
    pub started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
    pub exit_code: Option<i32>,
    pub diagnostic: Option<String>,
    pub result_len: Option<u64>,
}

impl From<&Job> for JobView {
    fn from(j: &Job) -> Self {
        JobView {
            job_id: j.job_id.clone(),
            app_id: j.app_id.clone(),
            state: j.state,
            environment: j.environment.clone(),
            archive_len: j.archive.len,
            uploaded_at: j.uploaded_at,
            started_at: j.started_at,
            finished_at: j.finished_at,
            exit_code: j.result.as_ref().map(|r| r.exit_code),
            diagnostic: j.result.as_ref().and_then(|r| r.diagnostic.clone()),
            result_len: j.result.as_ref().map(|r| r.artifact_len),
        }
    }
}

/// What a token holder sees of their own application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppView {
    pub app_id: AppId,
    pub state: AppState,
    pub nodes_requested: u32,
    pub assignment: Option<Vec<NodeId>>,
    pub period: Option<Period>,
    pub block_id: Option<BlockId>,
    pub master_node: Option<NodeId>,
    pub remaining_ms: Option<i64>,
    pub jobs: Vec<JobView>,
}

/// Review-queue entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdminAppView {
    pub app_id: AppId,
    pub state: AppState,
    pub applicant: Applicant,
    pub nodes_requested: u32,
    pub submitted_at: Timestamp,
    pub assignment: Option<Vec<NodeId>>,
    pub period: Option<Period>,
    pub block_id: Option<BlockId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub node_id: NodeId,
    pub tier: String,
    pub perf_score: u32,
    pub power: PowerState,
    pub temperature_c: f64,
    pub load: f64,
    pub allocated: bool,
    /// Admin view only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<BlockId>,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub block_id: BlockId,
    pub app_id: AppId,
    pub node_ids: Vec<NodeId>,
    pub master_node: NodeId,
    pub period: Period,
    pub remaining_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSnapshot {
    pub taken_at: Timestamp,
    pub nodes: Vec<NodeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<BlockEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanoutRequest {
    /// `all`, `block:<id>`, `tier:<label>` or a comma-separated node list.
    pub selector: String,
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanoutResult {
    pub node_id: NodeId,
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub error: Option<String>,
}

impl From<CommandEnvelope> for FanoutResult {
    fn from(e: CommandEnvelope) -> Self {
        let (exit_code, stdout, stderr) = match e.result {
            Some(r) => (Some(r.exit_code), r.stdout, r.stderr),
            None => (None, String::new(), String::new()),
        };
        FanoutResult {
            node_id: e.target,
            exit_code,
            stdout,
            stderr,
            error: e.error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanoutResponse {
    pub results: Vec<FanoutResult>,
}

/// Everything the service needs, already constructed.
pub struct ServiceParts {
    pub store: Arc<Store>,
    pub fleet: Arc<Fleet>,
    pub sentinel: Arc<Sentinel>,
    pub inventory: Inventory,
    pub clock: Arc<dyn Clock>,
    pub policy: Policy,
    pub identity: String,
    pub admin_secret: String,
    pub max_upload_bytes: usize,
}

pub struct ClusterService {
    store: Arc<Store>,
    fleet: Arc<Fleet>,
    sentinel: Arc<Sentinel>,
    inventory: Inventory,
    clock: Arc<dyn Clock>,
    policy: Policy,
    caller: Caller,
    admin_secret: String,
    max_upload_bytes: usize,
    ga: GaParams,
    launch: Mutex<()>,
}

impl std::fmt::Debug for ClusterService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClusterService")
            .field("policy", &self.policy)
            .field("nodes", &self.inventory.len())
            .finish_non_exhaustive()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn secret_eq(a: &str, b: &str) -> bool {
    let (a, b) = (Sha256::digest(a.as_bytes()), Sha256::digest(b.as_bytes()));
    a.iter()
        .zip(b.iter())
        .fold(0u8, |acc, (x, y)| acc | (x ^ y))
        == 0
}

impl ClusterService {
    pub fn new(parts: ServiceParts) -> Self {
        ClusterService {
            caller: Caller::new(parts.identity),
            store: parts.store,
            fleet: parts.fleet,
            sentinel: parts.sentinel,
            inventory: parts.inventory,
            clock: parts.clock,
            policy: parts.policy,
            admin_secret: parts.admin_secret,
            max_upload_bytes: parts.max_upload_bytes,
            ga: GaParams::default(),
            launch: Mutex::new(()),
        }
    }

    /// Opens the store, builds the simulated fleet and the sentinel, and
    /// brings nodes of blocks that were live before a restart back up.
    pub fn boot(config: &GatewayConfig, clock: Arc<dyn Clock>) -> Result<Self, BootError> {
        let inventory = match &config.inventory {
            Some(p) => Inventory::load(p)?,
            None => Inventory::demo(config.demo_nodes),
        };
        let store = Arc::new(Store::open(&config.data_dir)?);
        register_inventory(&store, &inventory)?;
        let fleet = Arc::new(Fleet::new(
            &inventory,
            Manifest::default(),
            config.gateway_identity.clone(),
            Arc::clone(&clock),
        ));
        let sentinel = Arc::new(Sentinel::new(
            Arc::clone(&store),
            Arc::clone(&fleet),
            config.policy.clone(),
            config.gateway_identity.clone(),
            Some(config.action_log.clone()),
        ));
        let svc = ClusterService::new(ServiceParts {
            store,
            fleet,
            sentinel,
            inventory,
            clock,
            policy: config.policy.clone(),
            identity: config.gateway_identity.clone(),
            admin_secret: config.admin_secret.clone(),
            max_upload_bytes: config.max_upload_bytes,
        });
        svc.resume()?;
        Ok(svc)
    }

    fn resume(&self) -> Result<(), ApiError> {
        for app in self.store.list::<Application>(RecordKind::Application)? {
            if !matches!(app.state, AppState::Confirmed | AppState::Active) {
                continue;
            }
            let block = self.block_of(&app)?;
            self.power_block(&app.app_id, &block, PowerState::On)?;
            if app.state == AppState::Confirmed {
                self.activate(&app.app_id)?;
            }
        }
        Ok(())
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn fleet(&self) -> &Arc<Fleet> {
        &self.fleet
    }

    pub fn sentinel(&self) -> &Arc<Sentinel> {
        &self.sentinel
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn max_upload_bytes(&self) -> usize {
        self.max_upload_bytes
    }

    fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn audit(&self, event: AuditEvent) -> Result<(), ApiError> {
        self.store.append_event(Stream::Audit, &event)?;
        Ok(())
    }

    fn audit_app(
        &self,
        app_id: &AppId,
        from: Option<AppState>,
        to: AppState,
    ) -> Result<(), ApiError> {
        tracing::info!(app = %app_id, ?from, ?to, "application transition");
        self.audit(AuditEvent::Application {
            app_id: app_id.clone(),
            from,
            to,
            at: self.now(),
        })
    }

    fn audit_job(&self, job: &Job, from: Option<JobState>) -> Result<(), ApiError> {
        self.audit(AuditEvent::Job {
            job_id: job.job_id.clone(),
            app_id: job.app_id.clone(),
            from,
            to: job.state,
            at: self.now(),
        })
    }

    fn check_admin(&self, secret: Option<&str>) -> Result<(), ApiError> {
        match secret {
            Some(s) if secret_eq(s, &self.admin_secret) => Ok(()),
            _ => Err(ApiError::bad_credential()),
        }
    }

    /// A record lookup where a malformed id simply finds nothing.
    fn lookup<T: serde::de::DeserializeOwned>(
        &self,
        kind: RecordKind,
        id: &str,
    ) -> Result<Option<T>, ApiError> {
        match self.store.get(kind, id) {
            Err(StoreError::BadId(_)) => Ok(None),
            other => Ok(other?),
        }
    }

    fn application(&self, app_id: &AppId) -> Result<Application, ApiError> {
        self.lookup(RecordKind::Application, app_id.as_str())?
            .ok_or_else(|| ApiError::unknown_application(app_id))
    }

    /// The application whose live token was presented.
    fn authenticate(&self, token: Option<&str>) -> Result<Application, ApiError> {
        let token = token
            .filter(|t| !t.is_empty())
            .ok_or_else(ApiError::invalid_token)?;
        self.store
            .list::<Application>(RecordKind::Application)?
            .into_iter()
            .find(|a| a.token_live() && a.access_token.as_ref().is_some_and(|t| t.matches(token)))
            .ok_or_else(ApiError::invalid_token)
    }

    /// Like [`Self::authenticate`], but the token must belong to `app_id`.
    /// Someone else's application looks the same as a missing one.
    fn tenant_for(&self, app_id: &AppId, token: Option<&str>) -> Result<Application, ApiError> {
        let app = self.authenticate(token)?;
        if app.app_id != *app_id {
            return Err(ApiError::unknown_application(app_id));
        }
        Ok(app)
    }

    fn owned_job(&self, app: &Application, job_id: &JobId) -> Result<Job, ApiError> {
        match self.lookup::<Job>(RecordKind::Job, job_id.as_str())? {
            Some(j) if j.app_id == app.app_id => Ok(j),
            _ => Err(ApiError::unknown_job(job_id)),
        }
    }

    fn block_of(&self, app: &Application) -> Result<Block, ApiError> {
        let id = app.block_id.as_ref().ok_or_else(ApiError::not_active)?;
        self.store
            .get(RecordKind::Block, id.as_str())?
            .ok_or_else(|| ApiError::internal(format!("block {id} of {} is missing", app.app_id)))
    }

    fn power_block(
        &self,
        app_id: &AppId,
        block: &Block,
        target: PowerState,
    ) -> Result<(), ApiError> {
        let caller = self.caller.on_behalf_of(app_id);
        for n in &block.node_ids {
            self.fleet.set_power(&caller, n, target)?;
        }
        Ok(())
    }

    /// Inventory joined with persisted ownership and live power state.
    fn node_records(&self) -> Result<Vec<NodeRecord>, ApiError> {
        let owners = ownership(&self.store)?;
        let mut out = Vec::with_capacity(self.inventory.len());
        for e in self.inventory.entries() {
            let view = self.fleet.view(&e.node_id)?;
            let owner = owners.get(&e.node_id).cloned().flatten();
            out.push(view.into_record(owner));
        }
        Ok(out)
    }

    /// GA search, cross-checked by the exhaustive oracle whenever the search
    /// space is small enough. The better of the two wins.
    fn allocate(
        &self,
        records: &[NodeRecord],
        request: &AllocationRequest,
    ) -> Result<Assignment, ApiError> {
        let ga = allocate_ga(request, records, &self.ga)?;
        match allocate_exhaustive(request, records) {
            Ok(best) if best.fitness > ga.fitness => {
                tracing::warn!(
                    ga = ga.fitness,
                    oracle = best.fitness,
                    "GA result below optimum; using oracle"
                );
                Ok(best)
            }
            Ok(_) | Err(AllocError::SearchSpaceTooLarge { .. }) => Ok(ga),
            Err(e) => Err(e.into()),
        }
    }

    pub fn submit_registration(&self, form: &RegistrationForm) -> Result<SubmitResponse, ApiError> {
        let app = validate_registration(form, self.now())?;
        self.store
            .transact(|txn| txn.put(RecordKind::Application, app.app_id.as_str(), &app))?;
        self.audit_app(&app.app_id, None, AppState::Submitted)?;
        Ok(SubmitResponse {
            app_id: app.app_id,
            state: app.state,
        })
    }

    pub fn admin_applications(&self, secret: Option<&str>) -> Result<Vec<AdminAppView>, ApiError> {
        self.check_admin(secret)?;
        let mut apps = self.store.list::<Application>(RecordKind::Application)?;
        apps.sort_by(|a, b| {
            a.submitted_at
                .cmp(&b.submitted_at)
                .then(a.app_id.cmp(&b.app_id))
        });
        Ok(apps
            .into_iter()
            .map(|a| AdminAppView {
                app_id: a.app_id,
                state: a.state,
                applicant: a.applicant,
                nodes_requested: a.nodes_requested,
                submitted_at: a.submitted_at,
                assignment: a.assignment,
                period: a.period,
                block_id: a.block_id,
            })
            .collect())
    }

    /// Approves or rejects. Approval checks capacity first (503), then
    /// policy (409), then runs the allocator and issues the access token.
    pub fn admin_review(
        &self,
        app_id: &AppId,
        decision: &ReviewDecision,
        secret: Option<&str>,
    ) -> Result<ReviewResponse, ApiError> {
        self.check_admin(secret)?;
        let app = self.application(app_id)?;
        let now = self.now();
        match *decision {
            ReviewDecision::Reject => {
                let next = self.store.transact(|txn| {
                    let cur: Application = txn
                        .get(RecordKind::Application, app_id.as_str())?
                        .ok_or_else(|| ApiError::unknown_application(app_id))?;
                    let next = transition_application(&cur, Event::Reject, &self.policy)?;
                    txn.put(RecordKind::Application, app_id.as_str(), &next)?;
                    Ok::<_, ApiError>((cur.state, next))
                })?;
                self.audit_app(app_id, Some(next.0), next.1.state)?;
                Ok(ReviewResponse {
                    app_id: app_id.clone(),
                    state: next.1.state,
                    assignment: None,
                    fitness: None,
                    period: None,
                    access_token: None,
                })
            }
            ReviewDecision::Approve {
                node_count,
                period_hours,
                min_perf_score,
                dry_run,
            } => {
                if app.state != AppState::Submitted {
                    return Err(ApiError::new(
                        409,
                        "IllegalTransition",
                        format!("event Approve is not allowed in state {}", app.state),
                    ));
                }
                let records = self.node_records()?;
                let free = records.iter().filter(|n| n.is_free()).count();
                if node_count as usize > free {
                    return Err(AllocError::InsufficientFreeNodes {
                        requested: node_count as usize,
                        free,
                    }
                    .into());
                }
                self.policy.check_node_count(node_count)?;
                let period = Period::starting_at(now, hours(u64::from(period_hours)))?;
                self.policy.check_period(&period)?;
                let request = AllocationRequest {
                    node_count: node_count as usize,
                    min_perf_score,
                };
                let assignment = self.allocate(&records, &request)?;
                if dry_run {
                    return Ok(ReviewResponse {
                        app_id: app_id.clone(),
                        state: app.state,
                        assignment: Some(assignment.node_ids),
                        fitness: Some(assignment.fitness),
                        period: Some(period),
                        access_token: None,
                    });
                }
                let next = self.store.transact(|txn| {
                    let cur: Application = txn
                        .get(RecordKind::Application, app_id.as_str())?
                        .ok_or_else(|| ApiError::unknown_application(app_id))?;
                    let event = Event::Approve {
                        assignment: assignment.node_ids.clone(),
                        period,
                    };
                    let next = transition_application(&cur, event, &self.policy)?;
                    txn.put(RecordKind::Application, app_id.as_str(), &next)?;
                    Ok::<_, ApiError>(next)
                })?;
                self.audit_app(app_id, Some(AppState::Submitted), AppState::Approved)?;
                Ok(ReviewResponse {
                    app_id: app_id.clone(),
                    state: next.state,
                    assignment: next.assignment,
                    fitness: Some(assignment.fitness),
                    period: next.period,
                    access_token: next.access_token.map(|t| t.as_str().to_owned()),
                })
            }
        }
    }

    fn try_confirm(
        &self,
        app_id: &AppId,
        now: Timestamp,
    ) -> Result<(Application, Block), ApiError> {
        self.store.transact(|txn| {
            let cur: Application = txn
                .get(RecordKind::Application, app_id.as_str())?
                .ok_or_else(|| ApiError::unknown_application(app_id))?;
            let mut next = transition_application(&cur, Event::Confirm, &self.policy)?;
            next.restart_period(now)?;
            let assignment = Assignment {
                node_ids: cur.assignment.clone().unwrap_or_default(),
                fitness: 0.0,
            };
            let period = next.period.expect("approved applications carry a period");
            let block = reserve_in(txn, &self.inventory, &assignment, app_id, period)?;
            next.block_id = Some(block.block_id.clone());
            txn.put(RecordKind::Application, app_id.as_str(), &next)?;
            Ok::<_, ApiError>((next, block))
        })
    }

    /// Picks a fresh assignment of the same size after a node was taken
    /// between approval and confirmation.
    fn reallocate(&self, app_id: &AppId) -> Result<(), ApiError> {
        let app = self.application(app_id)?;
        let count = app
            .assignment
            .as_ref()
            .map_or(app.nodes_requested as usize, Vec::len);
        let records = self.node_records()?;
        let assignment = self.allocate(&records, &AllocationRequest::new(count))?;
        tracing::info!(app = %app_id, nodes = ?assignment.node_ids, "reallocated after lost race");
        self.store.transact(|txn| {
            let mut cur: Application = txn
                .get(RecordKind::Application, app_id.as_str())?
                .ok_or_else(|| ApiError::unknown_application(app_id))?;
            if cur.state == AppState::Approved {
                cur.assignment = Some(assignment.node_ids.clone());
                txn.put(RecordKind::Application, app_id.as_str(), &cur)?;
            }
            Ok::<_, ApiError>(())
        })
    }

    fn activate(&self, app_id: &AppId) -> Result<Application, ApiError> {
        let app = self.store.transact(|txn| {
            let cur: Application = txn
                .get(RecordKind::Application, app_id.as_str())?
                .ok_or_else(|| ApiError::unknown_application(app_id))?;
            let next = transition_application(&cur, Event::Activate, &self.policy)?;
            txn.put(RecordKind::Application, app_id.as_str(), &next)?;
            Ok::<_, ApiError>(next)
        })?;
        self.audit_app(app_id, Some(AppState::Confirmed), AppState::Active)?;
        Ok(app)
    }

    /// Reserves the assigned nodes, restarts the usage period at now, powers
    /// the block on and activates it.
    pub fn confirm(
        &self,
        app_id: &AppId,
        token: Option<&str>,
    ) -> Result<ConfirmResponse, ApiError> {
        self.tenant_for(app_id, token)?;
        let now = self.now();
        let (_, block) = match self.try_confirm(app_id, now) {
            Err(e) if e.code == "RaceLost" => {
                self.reallocate(app_id)?;
                self.try_confirm(app_id, now)?
            }
            other => other?,
        };
        self.audit_app(app_id, Some(AppState::Approved), AppState::Confirmed)?;
        self.power_block(app_id, &block, PowerState::On)?;
        let app = self.activate(app_id)?;
        Ok(ConfirmResponse {
            app_id: app_id.clone(),
            state: app.state,
            block_id: block.block_id,
            node_ids: block.node_ids,
            master_node: block.master_node,
            period: block.period,
        })
    }

    pub fn application_view(
        &self,
        app_id: &AppId,
        token: Option<&str>,
    ) -> Result<AppView, ApiError> {
        let app = self.tenant_for(app_id, token)?;
        let block = match &app.block_id {
            Some(_) => Some(self.block_of(&app)?),
            None => None,
        };
        let now = self.now();
        let mut jobs: Vec<Job> = self
            .store
            .list::<Job>(RecordKind::Job)?
            .into_iter()
            .filter(|j| j.app_id == app.app_id)
            .collect();
        jobs.sort_by(|a, b| {
            a.uploaded_at
                .cmp(&b.uploaded_at)
                .then(a.job_id.cmp(&b.job_id))
        });
        Ok(AppView {
            app_id: app.app_id,
            state: app.state,
            nodes_requested: app.nodes_requested,
            assignment: app.assignment,
            period: app.period,
            block_id: app.block_id,
            master_node: block.as_ref().map(|b| b.master_node.clone()),
            remaining_ms: block
                .as_ref()
                .filter(|b| b.is_active())
                .map(|b| (b.period.end.0 - now.0).max(0)),
            jobs: jobs.iter().map(JobView::from).collect(),
        })
    }

    /// Stages a job bundle on the block's master node.
    pub fn upload_job(
        &self,
        app_id: &AppId,
        token: Option<&str>,
        environment: &str,
        archive: &[u8],
    ) -> Result<JobView, ApiError> {
        let app = self.tenant_for(app_id, token)?;
        if archive.len() > self.max_upload_bytes {
            return Err(ApiError::new(
                413,
                "PayloadTooLarge",
                format!(
                    "archive of {} bytes exceeds {}",
                    archive.len(),
                    self.max_upload_bytes
                ),
            ));
        }
        if archive.is_empty() {
            return Err(ApiError::new(400, "EmptyArchive", "the archive is empty"));
        }
        if !self.fleet.manifest().contains(environment) {
            return Err(ApiError::new(
                400,
                "UnknownEnvironment",
                format!("unknown environment {environment:?}"),
            ));
        }
        if app.state != AppState::Active {
            return Err(ApiError::not_active());
        }
        read_job_archive(archive)
            .map_err(|e| ApiError::new(400, "ArchiveCorrupt", e.to_string()))?;
        let block = self.block_of(&app)?;
        let job_id = JobId::generate();
        let caller = self.caller.on_behalf_of(&app.app_id);
        self.fleet.transfer_file(
            &caller,
            &block.master_node,
            Transfer::In {
                name: &archive_name(&job_id),
                bytes: archive,
            },
        )?;
        let job = Job {
            job_id: job_id.clone(),
            block_id: block.block_id.clone(),
            app_id: app.app_id.clone(),
            archive: ArchiveRef {
                len: archive.len() as u64,
                sha256: sha256_hex(archive),
            },
            environment: environment.to_owned(),
            state: JobState::Uploaded,
            result: None,
            uploaded_at: self.now(),
            started_at: None,
            finished_at: None,
        };
        self.store
            .transact(|txn| txn.put(RecordKind::Job, job_id.as_str(), &job))?;
        self.audit_job(&job, None)?;
        Ok(JobView::from(&job))
    }

    /// Loads the job's environment on every block node and starts one rank
    /// per node. A launch failure leaves the job `Failed` with a diagnostic.
    pub fn execute_job(&self, job_id: &JobId, token: Option<&str>) -> Result<JobView, ApiError> {
        let app = self.authenticate(token)?;
        let _launch = self.launch.lock();
        let job = self.owned_job(&app, job_id)?;
        if app.state != AppState::Active {
            return Err(ApiError::not_active());
        }
        if job.state != JobState::Uploaded {
            return Err(ApiError::new(
                409,
                "WrongJobState",
                format!("job {job_id} is {:?}", job.state),
            ));
        }
        let block = self.block_of(&app)?;
        let caller = self.caller.on_behalf_of(&app.app_id);
        let launched = self
            .fleet
            .switch_module(&caller, &block, &job.environment)
            .and_then(|_| self.fleet.spawn_job(&caller, &block, job_id));
        let now = self.now();
        let failure = match launched {
            Ok(_) => None,
            Err(e) => {
                tracing::warn!(job = %job_id, error = %e, "job launch failed");
                self.store.put_artifact(job_id.as_str(), &[])?;
                Some(JobResult {
                    exit_code: 255,
                    artifact_len: 0,
                    artifact_sha256: sha256_hex(&[]),
                    diagnostic: Some(e.to_string()),
                })
            }
        };
        let job = self.store.transact(|txn| {
            let mut j: Job = txn
                .get(RecordKind::Job, job_id.as_str())?
                .ok_or_else(|| ApiError::unknown_job(job_id))?;
            j.start(now)?;
            if let Some(r) = &failure {
                j.complete(r.clone(), now)?;
            }
            txn.put(RecordKind::Job, job_id.as_str(), &j)?;
            Ok::<_, ApiError>(j)
        })?;
        let mut running = job.clone();
        running.state = JobState::Running;
        self.audit_job(&running, Some(JobState::Uploaded))?;
        if job.state != JobState::Running {
            self.audit_job(&job, Some(JobState::Running))?;
        }
        Ok(JobView::from(&job))
    }

    fn settled_job(&self, job_id: &JobId, token: Option<&str>) -> Result<Job, ApiError> {
        let app = self.authenticate(token)?;
        let job = self.owned_job(&app, job_id)?;
        if job.state == JobState::Running {
            return Ok(self.sentinel.reconcile_job(job_id, self.now())?);
        }
        Ok(job)
    }

    pub fn job_status(&self, job_id: &JobId, token: Option<&str>) -> Result<JobView, ApiError> {
        Ok(JobView::from(&self.settled_job(job_id, token)?))
    }

    /// The result archive of a finished or failed job.
    pub fn download_results(
        &self,
        job_id: &JobId,
        token: Option<&str>,
    ) -> Result<Vec<u8>, ApiError> {
        let job = self.settled_job(job_id, token)?;
        if !job.state.is_terminal() {
            return Err(ApiError::new(
                409,
                "NotFinished",
                format!("job {job_id} is {:?}", job.state),
            ));
        }
        match self.store.get_artifact(job_id.as_str()) {
            Ok(bytes) => Ok(bytes),
            Err(StoreError::NotFound(_)) => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn usage_report(
        &self,
        app_id: &AppId,
        token: Option<&str>,
        admin_secret: Option<&str>,
    ) -> Result<UsageReport, ApiError> {
        let viewer = if admin_secret.is_some() {
            self.check_admin(admin_secret)?;
            Viewer::Admin
        } else {
            Viewer::Tenant(self.tenant_for(app_id, token)?.app_id)
        };
        Ok(self.sentinel.usage_report(app_id, &viewer)?)
    }

    /// Node table for the public dashboard. Owners and blocks are only
    /// included for the administrator; a wrong admin secret is rejected.
    pub fn cluster_snapshot(
        &self,
        admin_secret: Option<&str>,
    ) -> Result<ClusterSnapshot, ApiError> {
        let admin = match admin_secret {
            Some(_) => {
                self.check_admin(admin_secret)?;
                true
            }
            None => false,
        };
        let now = self.now();
        let owners = ownership(&self.store)?;
        let mut nodes = Vec::with_capacity(self.inventory.len());
        for e in self.inventory.entries() {
            let view = self.fleet.view(&e.node_id)?;
            let health = self.sentinel.node_health(&e.node_id);
            let (temperature_c, load) = match (&health.last_sample, view.power) {
                (Some(s), PowerState::On) => (s.temperature_c, s.load),
                _ => (view.temperature_c, view.load),
            };
            let owner = owners.get(&e.node_id).cloned().flatten();
            nodes.push(NodeEntry {
                node_id: e.node_id.clone(),
                tier: e.spec.label.clone(),
                perf_score: e.spec.perf_score,
                power: view.power,
                temperature_c,
                load,
                allocated: owner.is_some(),
                owner: if admin { owner } else { None },
                stale: view.power == PowerState::On && health.is_stale(),
            });
        }
        let blocks = if admin {
            let mut blocks: Vec<BlockEntry> = self
                .store
                .list::<Block>(RecordKind::Block)?
                .into_iter()
                .filter(Block::is_active)
                .map(|b| BlockEntry {
                    remaining_ms: (b.period.end.0 - now.0).max(0),
                    block_id: b.block_id,
                    app_id: b.app_id,
                    node_ids: b.node_ids,
                    master_node: b.master_node,
                    period: b.period,
                })
                .collect();
            blocks.sort_by(|a, b| a.block_id.cmp(&b.block_id));
            Some(blocks)
        } else {
            None
        };
        Ok(ClusterSnapshot {
            taken_at: now,
            nodes,
            blocks,
        })
    }

    fn select(&self, selector: &str) -> Result<Vec<NodeId>, ApiError> {
        let selector = selector.trim();
        let all = || self.inventory.entries().iter().map(|e| e.node_id.clone());
        let picked: Vec<NodeId> = if selector == "all" || selector == "*" {
            all().collect()
        } else if let Some(b) = selector.strip_prefix("block:") {
            match self.lookup::<Block>(RecordKind::Block, b)? {
                Some(block) if block.is_active() => block.node_ids,
                _ => Vec::new(),
            }
        } else if let Some(t) = selector.strip_prefix("tier:") {
            self.inventory
                .entries()
                .iter()
                .filter(|e| e.spec.label == t)
                .map(|e| e.node_id.clone())
                .collect()
        } else {
            let mut ids = Vec::new();
            for part in selector.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let id = NodeId::from(part);
                if self.inventory.get(&id).is_none() {
                    return Err(ApiError::new(
                        400,
                        "BadSelector",
                        format!("unknown node {part:?}"),
                    ));
                }
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            ids
        };
        Ok(picked)
    }

    /// Runs one command on every selected node at once. Powered-off nodes
    /// get a `NodeUnreachable` entry; at least one selected node must be on.
    pub fn admin_fanout(
        &self,
        request: &FanoutRequest,
        secret: Option<&str>,
    ) -> Result<FanoutResponse, ApiError> {
        self.check_admin(secret)?;
        if request.command.trim().is_empty() {
            return Err(ApiError::bad_request("command is empty"));
        }
        let ids = self.select(&request.selector)?;
        let mut any_on = false;
        for id in &ids {
            any_on |= self.fleet.view(id)?.power == PowerState::On;
        }
        if !any_on {
            return Err(ApiError::new(
                404,
                "NoNodesMatched",
                format!("selector {:?} matches no powered-on node", request.selector),
            ));
        }
        let envelopes = self.fleet.exec_many(&self.caller, &ids, &request.command)?;
        Ok(FanoutResponse {
            results: envelopes.into_iter().map(FanoutResult::from).collect(),
        })
    }

    /// Audit entries visible to the administrator, oldest first.
    pub fn audit_log(&self, secret: Option<&str>) -> Result<Vec<AuditEvent>, ApiError> {
        self.check_admin(secret)?;
        Ok(self
            .store
            .read_stream(Stream::Audit)?
            .into_iter()
            .filter_map(|e| serde_json::from_value(e.payload).ok())
            .collect())
    }

    /// Ends an expired application for good. Its token stops working.
    pub fn close(&self, app_id: &AppId, secret: Option<&str>) -> Result<AppState, ApiError> {
        self.check_admin(secret)?;
        let app = self.store.transact(|txn| {
            let cur: Application = txn
                .get(RecordKind::Application, app_id.as_str())?
                .ok_or_else(|| ApiError::unknown_application(app_id))?;
            let next = transition_application(&cur, Event::Close, &self.policy)?;
            txn.put(RecordKind::Application, app_id.as_str(), &next)?;
            Ok::<_, ApiError>(next)
        })?;
        self.audit_app(app_id, Some(AppState::Expired), AppState::Closed)?;
        Ok(app.state)
    }
}
