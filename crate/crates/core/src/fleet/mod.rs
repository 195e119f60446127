//! Simulated cluster nodes and the gateway's command channel to them.
//!
//! Every node is an independent sequential executor: commands to one node
//! run one at a time, commands to different nodes run in parallel. Only the
//! configured gateway identity may use the channel, and every accepted
//! command is kept as a [`CommandEnvelope`].

pub mod archive;
pub mod modules;
mod node;
pub mod shell;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::{Mutex, MutexGuard};
use serde::{Deserialize, Serialize};

pub use archive::{build_job_archive, read_job_archive, ArchiveError, FailureMode, SimJobScript};
pub use modules::{Environment, Manifest, ModuleManifestEntry};
pub use node::{ProcState, AMBIENT_C, DEGREES_PER_LOAD};
pub use shell::CommandResult;

use crate::allocator::Inventory;
use crate::domain::{
    AppId, Block, Clock, JobId, NodeId, NodeRecord, NodeSpecClass, PowerState, Timestamp,
};
use node::{rank_output_name, NodeState};
use shell::Step;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FleetError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is unreachable")]
    NodeUnreachable(NodeId),
    #[error("identity {0:?} is not authorized on the node channel")]
    IdentityRejected(String),
    #[error("{node}: no such file {name:?}")]
    NoSuchFile { node: NodeId, name: String },
    #[error("invalid file name {0:?}")]
    BadPath(String),
    #[error("unknown module {0:?}")]
    UnknownModule(String),
    #[error(transparent)]
    ArchiveCorrupt(#[from] ArchiveError),
    #[error("job launch failed on {node}: {reason}")]
    LaunchFailed { node: NodeId, reason: String },
    #[error("sensors of node {0} are not responding")]
    SensorUnavailable(NodeId),
    #[error("wire error: {0}")]
    Wire(String),
}

impl FleetError {
    pub fn kind(&self) -> &'static str {
        match self {
            FleetError::UnknownNode(_) => "UnknownNode",
            FleetError::NodeUnreachable(_) => "NodeUnreachable",
            FleetError::IdentityRejected(_) => "IdentityRejected",
            FleetError::NoSuchFile { .. } => "NoSuchFile",
            FleetError::BadPath(_) => "BadPath",
            FleetError::UnknownModule(_) => "UnknownModule",
            FleetError::ArchiveCorrupt(_) => "ArchiveCorrupt",
            FleetError::LaunchFailed { .. } => "LaunchFailed",
            FleetError::SensorUnavailable(_) => "SensorUnavailable",
            FleetError::Wire(_) => "Wire",
        }
    }
}

/// Who is using the channel: the key identity, and the application a
/// command is issued for, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caller {
    pub identity: String,
    pub tenant: Option<AppId>,
}

impl Caller {
    pub fn new(identity: impl Into<String>) -> Self {
        Caller {
            identity: identity.into(),
            tenant: None,
        }
    }

    pub fn on_behalf_of(&self, app: &AppId) -> Caller {
        Caller {
            identity: self.identity.clone(),
            tenant: Some(app.clone()),
        }
    }
}

/// Audit record of one command sent to one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEnvelope {
    pub seq: u64,
    pub target: NodeId,
    pub command: String,
    pub sender: String,
    pub on_behalf_of: Option<AppId>,
    pub sent_at: Timestamp,
    /// Present iff the node was on and answered.
    pub result: Option<CommandResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub node_id: NodeId,
    pub temperature_c: f64,
    pub load: f64,
    pub timestamp: Timestamp,
}

/// Hardware-level view of one node. Ownership lives in the store, not here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub node_id: NodeId,
    pub spec: NodeSpecClass,
    pub power: PowerState,
    pub temperature_c: f64,
    pub load: f64,
}

impl NodeView {
    pub fn into_record(self, owner: Option<crate::domain::BlockId>) -> NodeRecord {
        NodeRecord {
            node_id: self.node_id,
            spec: self.spec,
            power: self.power,
            owner,
            temperature_c: self.temperature_c,
            load: self.load,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Transfer<'a> {
    In { name: &'a str, bytes: &'a [u8] },
    Out { name: &'a str },
}

/// Rank layout of a job over a block: the master is rank 0, the remaining
/// nodes follow in block order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobHandle {
    pub job_id: JobId,
    pub master: NodeId,
    pub ranks: Vec<(u32, NodeId)>,
}

impl JobHandle {
    pub fn new(block: &Block, job_id: &JobId) -> Self {
        let mut ranks = vec![(0, block.master_node.clone())];
        let others = block.node_ids.iter().filter(|n| **n != block.master_node);
        ranks.extend(others.enumerate().map(|(i, n)| (i as u32 + 1, n.clone())));
        JobHandle {
            job_id: job_id.clone(),
            master: block.master_node.clone(),
            ranks,
        }
    }

    pub fn archive_name(&self) -> String {
        archive_name(&self.job_id)
    }
}

/// Name under which an uploaded job bundle is staged on the master node.
pub fn archive_name(job_id: &JobId) -> String {
    format!("{job_id}.tar")
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobProgress {
    Running,
    Done(JobOutcome),
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobOutcome {
    pub exit_code: i32,
    /// ustar archive with one `rank-N.out` per finished rank and a `status`
    /// summary.
    pub artifact: Vec<u8>,
    pub diagnostic: Option<String>,
}

struct SimNode {
    spec: NodeSpecClass,
    address: String,
    /// Serializes commands. Never taken by sensor reads or power control.
    exec: Mutex<()>,
    state: Mutex<NodeState>,
}

pub struct Fleet {
    identity: String,
    manifest: Manifest,
    clock: Arc<dyn Clock>,
    nodes: BTreeMap<NodeId, SimNode>,
    log: Mutex<Vec<CommandEnvelope>>,
    rejected: Mutex<u64>,
}

impl std::fmt::Debug for Fleet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fleet")
            .field("identity", &self.identity)
            .field("nodes", &self.nodes.len())
            .finish_non_exhaustive()
    }
}

impl Fleet {
    /// All nodes start powered off.
    pub fn new(
        inventory: &Inventory,
        manifest: Manifest,
        identity: impl Into<String>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let nodes = inventory
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let sim = SimNode {
                    spec: e.spec.clone(),
                    address: format!("10.1.{}.{}", i / 250, i % 250 + 2),
                    exec: Mutex::new(()),
                    state: Mutex::new(NodeState::new()),
                };
                (e.node_id.clone(), sim)
            })
            .collect();
        Fleet {
            identity: identity.into(),
            manifest,
            clock,
            nodes,
            log: Mutex::new(Vec::new()),
            rejected: Mutex::new(0),
        }
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    /// Private network address of a node. Internal to the gateway side.
    pub fn address(&self, node: &NodeId) -> Option<&str> {
        self.nodes.get(node).map(|n| n.address.as_str())
    }

    fn node(&self, id: &NodeId) -> Result<&SimNode, FleetError> {
        self.nodes
            .get(id)
            .ok_or_else(|| FleetError::UnknownNode(id.clone()))
    }

    fn authorize(&self, caller: &Caller) -> Result<(), FleetError> {
        if caller.identity == self.identity {
            Ok(())
        } else {
            *self.rejected.lock() += 1;
            tracing::warn!(identity = %caller.identity, "rejected node channel identity");
            Err(FleetError::IdentityRejected(caller.identity.clone()))
        }
    }

    /// Number of channel uses refused for a wrong identity.
    pub fn rejected_count(&self) -> u64 {
        *self.rejected.lock()
    }

    pub fn envelopes(&self) -> Vec<CommandEnvelope> {
        self.log.lock().clone()
    }

    pub fn envelope_count(&self) -> usize {
        self.log.lock().len()
    }

    fn record(
        &self,
        caller: &Caller,
        target: &NodeId,
        command: String,
        sent_at: Timestamp,
        outcome: Result<CommandResult, &FleetError>,
    ) -> CommandEnvelope {
        let mut log = self.log.lock();
        let (result, error) = match outcome {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.kind().to_owned())),
        };
        let env = CommandEnvelope {
            seq: log.len() as u64 + 1,
            target: target.clone(),
            command,
            sender: caller.identity.clone(),
            on_behalf_of: caller.tenant.clone(),
            sent_at,
            result,
            error,
        };
        log.push(env.clone());
        env
    }

    fn view_of(&self, id: &NodeId, node: &SimNode, st: &NodeState) -> NodeView {
        NodeView {
            node_id: id.clone(),
            spec: node.spec.clone(),
            power: st.power,
            temperature_c: st.temperature(),
            load: st.load(),
        }
    }

    pub fn view(&self, id: &NodeId) -> Result<NodeView, FleetError> {
        let n = self.node(id)?;
        let mut st = n.state.lock();
        st.refresh(self.clock.now());
        Ok(self.view_of(id, n, &st))
    }

    pub fn views(&self) -> Vec<NodeView> {
        self.nodes
            .keys()
            .filter_map(|id| self.view(id).ok())
            .collect()
    }

    /// Idempotent. Powering off kills every process on the node and resets
    /// its environment; other nodes are untouched.
    pub fn set_power(
        &self,
        caller: &Caller,
        id: &NodeId,
        target: PowerState,
    ) -> Result<NodeView, FleetError> {
        self.authorize(caller)?;
        let n = self.node(id)?;
        let now = self.clock.now();
        let mut st = n.state.lock();
        st.refresh(now);
        let was = st.power;
        let killed = st.set_power(target);
        let view = self.view_of(id, n, &st);
        drop(st);
        if was != target {
            let verb = match target {
                PowerState::On => "power on",
                PowerState::Off => "power off",
            };
            let stdout: String = killed
                .iter()
                .map(|(job, rank)| format!("killed {job} rank {rank}\n"))
                .collect();
            if !killed.is_empty() {
                tracing::info!(node = %id, ranks = killed.len(), "power-off killed running ranks");
            }
            self.record(
                caller,
                id,
                verb.to_owned(),
                now,
                Ok(CommandResult::ok(stdout)),
            );
        }
        Ok(view)
    }

    /// Runs a command and records it. Only an unknown node is an `Err`; an
    /// unreachable node yields an envelope without a result.
    fn dispatch(
        &self,
        caller: &Caller,
        id: &NodeId,
        command: &str,
    ) -> Result<CommandEnvelope, FleetError> {
        let n = self.node(id)?;
        let _serial = n.exec.lock();
        let sent_at = self.clock.now();
        let mut st = n.state.lock();
        if st.power == PowerState::Off {
            drop(st);
            let err = FleetError::NodeUnreachable(id.clone());
            return Ok(self.record(caller, id, command.to_owned(), sent_at, Err(&err)));
        }
        let result = match shell::run(&mut st, id, &self.manifest, command, sent_at) {
            Step::Done(r) => r,
            Step::Sleep(d) => {
                drop(st);
                std::thread::sleep(d);
                CommandResult::ok("")
            }
        };
        Ok(self.record(caller, id, command.to_owned(), sent_at, Ok(result)))
    }

    fn run_on(
        &self,
        caller: &Caller,
        id: &NodeId,
        command: &str,
    ) -> Result<CommandEnvelope, FleetError> {
        let env = self.dispatch(caller, id, command)?;
        match env.result {
            Some(_) => Ok(env),
            None => Err(FleetError::NodeUnreachable(id.clone())),
        }
    }

    /// Runs one command in the node's shell.
    pub fn exec_command(
        &self,
        caller: &Caller,
        id: &NodeId,
        command: &str,
    ) -> Result<CommandEnvelope, FleetError> {
        self.authorize(caller)?;
        self.run_on(caller, id, command)
    }

    /// Runs a command on several nodes at once. Per-node failures are
    /// reported in that node's envelope and do not affect the others.
    pub fn exec_many(
        &self,
        caller: &Caller,
        ids: &[NodeId],
        command: &str,
    ) -> Result<Vec<CommandEnvelope>, FleetError> {
        self.authorize(caller)?;
        let sent_at = self.clock.now();
        Ok(std::thread::scope(|s| {
            let handles: Vec<_> = ids
                .iter()
                .map(|id| s.spawn(move || self.dispatch(caller, id, command)))
                .collect();
            handles
                .into_iter()
                .zip(ids)
                .map(|(h, id)| match h.join().expect("node worker panicked") {
                    Ok(env) => env,
                    Err(e) => self.record(caller, id, command.to_owned(), sent_at, Err(&e)),
                })
                .collect()
        }))
    }

    pub fn transfer_file(
        &self,
        caller: &Caller,
        id: &NodeId,
        transfer: Transfer<'_>,
    ) -> Result<Option<Vec<u8>>, FleetError> {
        self.authorize(caller)?;
        self.transfer(caller, id, transfer)
    }

    fn transfer(
        &self,
        caller: &Caller,
        id: &NodeId,
        transfer: Transfer<'_>,
    ) -> Result<Option<Vec<u8>>, FleetError> {
        let n = self.node(id)?;
        let (name, command) = match transfer {
            Transfer::In { name, bytes } => {
                (name, format!("scp-in {name} ({} bytes)", bytes.len()))
            }
            Transfer::Out { name } => (name, format!("scp-out {name}")),
        };
        if !shell::valid_path(name) {
            return Err(FleetError::BadPath(name.to_owned()));
        }
        let _serial = n.exec.lock();
        let sent_at = self.clock.now();
        let mut st = n.state.lock();
        if st.power == PowerState::Off {
            drop(st);
            let err = FleetError::NodeUnreachable(id.clone());
            self.record(caller, id, command, sent_at, Err(&err));
            return Err(err);
        }
        st.refresh(sent_at);
        let out = match transfer {
            Transfer::In { name, bytes } => {
                st.files.insert(name.to_owned(), bytes.to_vec());
                None
            }
            Transfer::Out { name } => match st.files.get(name) {
                Some(b) => Some(b.clone()),
                None => {
                    drop(st);
                    let msg = format!("scp: {name}: No such file or directory\n");
                    self.record(
                        caller,
                        id,
                        command,
                        sent_at,
                        Ok(CommandResult::fail(1, msg)),
                    );
                    return Err(FleetError::NoSuchFile {
                        node: id.clone(),
                        name: name.to_owned(),
                    });
                }
            },
        };
        drop(st);
        self.record(caller, id, command, sent_at, Ok(CommandResult::ok("")));
        Ok(out)
    }

    /// Sensor bus read; never waits for a running command.
    pub fn read_sensors(&self, id: &NodeId) -> Result<TelemetrySample, FleetError> {
        let n = self.node(id)?;
        let now = self.clock.now();
        let mut st = n.state.lock();
        if st.sensor_fault {
            return Err(FleetError::SensorUnavailable(id.clone()));
        }
        st.refresh(now);
        Ok(TelemetrySample {
            node_id: id.clone(),
            temperature_c: st.temperature(),
            load: st.load(),
            timestamp: now,
        })
    }

    /// Adds a fixed offset to a node's temperature reading.
    pub fn inject_temperature_offset(&self, id: &NodeId, offset_c: f64) -> Result<(), FleetError> {
        self.node(id)?.state.lock().temp_offset = offset_c;
        Ok(())
    }

    /// Makes a node's sensors stop answering (or answer again).
    pub fn inject_sensor_fault(&self, id: &NodeId, faulty: bool) -> Result<(), FleetError> {
        self.node(id)?.state.lock().sensor_fault = faulty;
        Ok(())
    }

    /// Loads `module` on every node of the block, replacing whatever was
    /// loaded. Either every node switches or none does. Returns the master's
    /// resulting environment.
    pub fn switch_module(
        &self,
        caller: &Caller,
        block: &Block,
        module: &str,
    ) -> Result<BTreeMap<String, String>, FleetError> {
        self.authorize(caller)?;
        if !self.manifest.contains(module) {
            return Err(FleetError::UnknownModule(module.to_owned()));
        }
        let ids: BTreeSet<&NodeId> = block.node_ids.iter().collect();
        let nodes: Vec<(&NodeId, &SimNode)> = ids
            .iter()
            .map(|id| Ok((*id, self.node(id)?)))
            .collect::<Result<_, FleetError>>()?;
        // Sorted acquisition keeps concurrent multi-node operations deadlock free.
        let _serial: Vec<MutexGuard<'_, ()>> = nodes.iter().map(|(_, n)| n.exec.lock()).collect();
        let mut states: Vec<MutexGuard<'_, NodeState>> =
            nodes.iter().map(|(_, n)| n.state.lock()).collect();
        if let Some(((id, _), _)) = nodes
            .iter()
            .zip(&states)
            .find(|(_, st)| st.power == PowerState::Off)
        {
            return Err(FleetError::NodeUnreachable((*id).clone()));
        }
        let now = self.clock.now();
        let command = format!("module switch {module}");
        let mut master_env = BTreeMap::new();
        for ((id, _), st) in nodes.iter().zip(states.iter_mut()) {
            let Step::Done(r) = shell::run(st, id, &self.manifest, &command, now) else {
                unreachable!("module switch never sleeps")
            };
            self.record(caller, id, command.clone(), now, Ok(r));
            if **id == block.master_node {
                master_env = st.env.vars().clone();
            }
        }
        debug_assert!(states
            .windows(2)
            .all(|w| w[0].env.vars() == w[1].env.vars()));
        Ok(master_env)
    }

    /// Unpacks the staged bundle on the master, copies it to every other
    /// block node and starts one rank per node. If any launch fails the
    /// ranks already started are killed.
    pub fn spawn_job(
        &self,
        caller: &Caller,
        block: &Block,
        job_id: &JobId,
    ) -> Result<JobHandle, FleetError> {
        self.authorize(caller)?;
        let handle = JobHandle::new(block, job_id);
        let tar = handle.archive_name();
        let dir = job_id.as_str();
        let bytes = self
            .transfer(caller, &handle.master, Transfer::Out { name: &tar })?
            .expect("out transfer returns bytes");
        read_job_archive(&bytes)?;
        let unpack = format!("unpack {tar} {dir}");
        let launch = |rank: u32, id: &NodeId| -> Result<(), FleetError> {
            if *id != handle.master {
                self.transfer(
                    caller,
                    id,
                    Transfer::In {
                        name: &tar,
                        bytes: &bytes,
                    },
                )?;
            }
            for cmd in [unpack.clone(), format!("run {dir} {rank}")] {
                let env = self.run_on(caller, id, &cmd)?;
                let r = env.result.expect("reachable node answers");
                if r.exit_code != 0 {
                    return Err(FleetError::LaunchFailed {
                        node: id.clone(),
                        reason: r.stderr.trim_end().to_owned(),
                    });
                }
            }
            Ok(())
        };
        let results: Vec<Result<(), FleetError>> = std::thread::scope(|s| {
            let hs: Vec<_> = handle
                .ranks
                .iter()
                .map(|(rank, id)| s.spawn(move || launch(*rank, id)))
                .collect();
            hs.into_iter()
                .map(|h| h.join().expect("launch worker panicked"))
                .collect()
        });
        if let Some(err) = results.into_iter().find_map(Result::err) {
            self.kill_job(caller, &handle);
            return Err(err);
        }
        tracing::debug!(job = %job_id, ranks = handle.ranks.len(), "job launched");
        Ok(handle)
    }

    /// Kills the job's ranks on every reachable node.
    pub fn kill_job(&self, caller: &Caller, handle: &JobHandle) -> Vec<CommandEnvelope> {
        if self.authorize(caller).is_err() {
            return Vec::new();
        }
        let ids: Vec<NodeId> = handle.ranks.iter().map(|(_, n)| n.clone()).collect();
        self.exec_many(caller, &ids, &format!("kill {}", handle.job_id))
            .unwrap_or_default()
    }

    /// Checks the job's ranks. Once none is running, gathers rank outputs on
    /// the master, packs them into the result artifact and returns it.
    pub fn poll_job(&self, caller: &Caller, handle: &JobHandle) -> Result<JobProgress, FleetError> {
        self.authorize(caller)?;
        let now = self.clock.now();
        let job = handle.job_id.as_str();
        let mut states = self.rank_states(handle, now)?;
        let lost = states
            .iter()
            .any(|s| !matches!(s, Some(ProcState::Running | ProcState::Exited(_))));
        if states.contains(&Some(ProcState::Running)) {
            if !lost {
                return Ok(JobProgress::Running);
            }
            // A rank is gone, so the job cannot complete; stop the rest.
            self.kill_job(caller, handle);
            states = self.rank_states(handle, now)?;
        }

        let mut outputs: Vec<(String, Vec<u8>)> = Vec::new();
        let mut status = String::new();
        let mut problems = Vec::new();
        let mut exit_code = 0;
        for ((rank, id), ps) in handle.ranks.iter().zip(states) {
            let name = rank_output_name(job, *rank);
            let code = match ps {
                Some(ProcState::Exited(c)) => {
                    match self.collect(caller, handle, id, &name) {
                        Ok(bytes) => outputs.push((format!("rank-{rank}.out"), bytes)),
                        Err(e) => problems.push(format!("rank {rank} output lost: {e}")),
                    }
                    if c != 0 {
                        problems.push(format!("rank {rank} on {id} exited with status {c}"));
                    }
                    c
                }
                Some(ProcState::Killed) => {
                    problems.push(format!("rank {rank} on {id} was killed"));
                    137
                }
                Some(ProcState::Running) => {
                    problems.push(format!("rank {rank} on {id} could not be stopped"));
                    255
                }
                None => {
                    problems.push(format!("rank {rank} on {id} is missing"));
                    255
                }
            };
            if exit_code == 0 {
                exit_code = code;
            }
            status.push_str(&format!("rank {rank} {id} {}\n", code));
        }
        if exit_code == 0 && !problems.is_empty() {
            exit_code = 1;
        }
        let mut files: Vec<(&str, &[u8])> = outputs
            .iter()
            .map(|(n, b)| (n.as_str(), b.as_slice()))
            .collect();
        files.push(("status", status.as_bytes()));
        let packed = archive::pack(files);
        let result_name = format!("{job}/result.tar");
        let artifact = match self.transfer(
            caller,
            &handle.master,
            Transfer::In {
                name: &result_name,
                bytes: &packed,
            },
        ) {
            Ok(_) => self
                .transfer(caller, &handle.master, Transfer::Out { name: &result_name })?
                .expect("out transfer returns bytes"),
            Err(_) => packed,
        };
        Ok(JobProgress::Done(JobOutcome {
            exit_code,
            artifact,
            diagnostic: (!problems.is_empty()).then(|| problems.join("; ")),
        }))
    }

    fn rank_states(
        &self,
        handle: &JobHandle,
        now: Timestamp,
    ) -> Result<Vec<Option<ProcState>>, FleetError> {
        handle
            .ranks
            .iter()
            .map(|(rank, id)| {
                let mut st = self.node(id)?.state.lock();
                st.refresh(now);
                Ok(st.proc_state(handle.job_id.as_str(), *rank))
            })
            .collect()
    }

    /// Moves one rank output onto the master and returns its bytes.
    fn collect(
        &self,
        caller: &Caller,
        handle: &JobHandle,
        from: &NodeId,
        name: &str,
    ) -> Result<Vec<u8>, FleetError> {
        let bytes = self
            .transfer(caller, from, Transfer::Out { name })?
            .expect("out transfer returns bytes");
        if *from != handle.master {
            self.transfer(
                caller,
                &handle.master,
                Transfer::In {
                    name,
                    bytes: &bytes,
                },
            )?;
        }
        Ok(bytes)
    }
}
