//! Node selection for newly approved applications.
//!
//! A block is chosen once, at approval, and never rebalanced. The objective
//! rewards capable and homogeneous blocks:
//!
//! ```text
//! fitness = Σ perf_score − (max perf_score − min perf_score) − 1000·[any perf_score < min_perf_score]
//! ```
//!
//! [`allocate_ga`] searches with a seeded genetic algorithm; [`allocate_exhaustive`]
//! enumerates every subset and serves as its oracle on small inventories.

mod exhaustive;
mod ga;
mod inventory;
mod reservation;

pub use exhaustive::{allocate_exhaustive, MAX_EXHAUSTIVE_SUBSETS};
pub use ga::allocate_ga;
pub use inventory::{Inventory, InventoryEntry, InventoryError};
pub use reservation::{
    master_for, ownership, register_inventory, release, release_in, reserve, reserve_in,
    NodeOwnership,
};

use serde::{Deserialize, Serialize};

use crate::domain::{AppId, BlockId, NodeId, NodeRecord};
use crate::store::StoreError;

/// Penalty applied when any node falls below the requested minimum score.
pub const UNDERPOWERED_PENALTY: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationRequest {
    pub node_count: usize,
    /// 0 means no preference.
    pub min_perf_score: u32,
}

impl AllocationRequest {
    pub fn new(node_count: usize) -> Self {
        AllocationRequest {
            node_count,
            min_perf_score: 0,
        }
    }
}

/// A candidate block: distinct node ids sorted ascending, with their score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub node_ids: Vec<NodeId>,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaParams {
    pub population: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub rng_seed: u64,
}

impl Default for GaParams {
    fn default() -> Self {
        GaParams {
            population: 32,
            generations: 100,
            mutation_rate: 0.05,
            crossover_rate: 0.8,
            rng_seed: 0x4c50_4321,
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<(), AllocError> {
        let rate_ok = |r: f64| r > 0.0 && r < 1.0;
        if self.population < 2
            || self.generations == 0
            || !rate_ok(self.mutation_rate)
            || !rate_ok(self.crossover_rate)
        {
            return Err(AllocError::BadParams(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AllocError {
    #[error("candidate has {got} nodes, request wants {want}")]
    WrongCardinality { want: usize, got: usize },
    #[error("node {0} already belongs to a block")]
    NodeNotFree(NodeId),
    #[error("requested {requested} nodes but only {free} are free")]
    InsufficientFreeNodes { requested: usize, free: usize },
    #[error("search space of {subsets} subsets exceeds the exhaustive limit")]
    SearchSpaceTooLarge { subsets: u128 },
    #[error("node {node} was taken by another block before reservation")]
    RaceLost { node: NodeId },
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("application {0} already owns a block")]
    AlreadyReserved(AppId),
    #[error("invalid GA parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Scores a candidate block. Higher is better.
pub fn fitness(candidate: &[NodeRecord], request: &AllocationRequest) -> Result<f64, AllocError> {
    if candidate.len() != request.node_count {
        return Err(AllocError::WrongCardinality {
            want: request.node_count,
            got: candidate.len(),
        });
    }
    if let Some(taken) = candidate.iter().find(|n| !n.is_free()) {
        return Err(AllocError::NodeNotFree(taken.node_id.clone()));
    }
    Ok(score(
        candidate.iter().map(|n| n.spec.perf_score),
        request.min_perf_score,
    ))
}

/// The objective over raw perf scores, without precondition checks.
pub(crate) fn score(perf: impl IntoIterator<Item = u32>, min_perf_score: u32) -> f64 {
    let mut sum = 0u64;
    let mut lo = u32::MAX;
    let mut hi = 0u32;
    let mut any = false;
    for p in perf {
        any = true;
        sum += u64::from(p);
        lo = lo.min(p);
        hi = hi.max(p);
    }
    if !any {
        return 0.0;
    }
    let mut f = sum as f64 - f64::from(hi - lo);
    if lo < min_perf_score {
        f -= UNDERPOWERED_PENALTY;
    }
    f
}

/// Free nodes sorted by id; the common starting point for both searches.
pub(crate) fn free_sorted(
    inventory: &[NodeRecord],
    request: &AllocationRequest,
) -> Result<Vec<NodeRecord>, AllocError> {
    let mut free: Vec<NodeRecord> = inventory.iter().filter(|n| n.is_free()).cloned().collect();
    free.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    if request.node_count == 0 || free.len() < request.node_count {
        return Err(AllocError::InsufficientFreeNodes {
            requested: request.node_count,
            free: free.len(),
        });
    }
    Ok(free)
}
