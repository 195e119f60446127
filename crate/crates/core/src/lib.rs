//! Control plane for a public, anonymously accessible compute cluster.
//!
//! Users register, an administrator approves and the allocator picks an
//! isolated block of heterogeneous nodes, the user confirms, uploads and runs
//! a parallel program, then downloads results. A sentinel loop watches node
//! temperatures and powers blocks off when their usage period ends.
//!
//! Modules map onto the layers of the service:
//!
//! * [`domain`]: shared types and the application/job state machines.
//! * [`allocator`]: genetic-algorithm node selection with an exhaustive oracle.
//! * [`fleet`]: the simulated nodes and the gateway-to-node command channel.
//! * [`store`]: durable transactional records, event streams and artifacts.
//! * [`sentinel`]: telemetry ingestion, threshold shutdown, period expiry.
//! * [`gateway`]: the HTTP surface and the workflow logic behind it.

pub mod allocator;
pub mod domain;
pub mod fleet;
pub mod gateway;
pub mod keyvalue;
pub mod sentinel;
pub mod store;

pub use domain::{
    AppId, AppState, Application, Block, BlockId, Clock, Job, JobId, JobState, ManualClock, NodeId,
    NodeRecord, NodeSpecClass, Period, Policy, PowerState, SystemClock, Timestamp,
};
