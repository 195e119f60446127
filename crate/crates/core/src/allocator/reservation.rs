use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AllocError, Assignment, Inventory};
use crate::domain::{AppId, Block, BlockId, NodeId, Period, Timestamp};
use crate::store::{RecordKind, Store, Txn};

/// Persistent ownership stamp of one node. The single source of truth for
/// which block, if any, holds the node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeOwnership {
    pub node_id: NodeId,
    pub owner: Option<BlockId>,
}

/// Creates an ownership record for every inventory node that lacks one.
pub fn register_inventory(store: &Store, inventory: &Inventory) -> Result<(), AllocError> {
    store.transact(|txn| {
        for e in inventory.entries() {
            if txn
                .get::<NodeOwnership>(RecordKind::Node, e.node_id.as_str())?
                .is_none()
            {
                txn.put(
                    RecordKind::Node,
                    e.node_id.as_str(),
                    &NodeOwnership {
                        node_id: e.node_id.clone(),
                        owner: None,
                    },
                )?;
            }
        }
        Ok::<_, AllocError>(())
    })
}

/// Current owner of every registered node.
pub fn ownership(store: &Store) -> Result<BTreeMap<NodeId, Option<BlockId>>, AllocError> {
    Ok(store
        .list::<NodeOwnership>(RecordKind::Node)?
        .into_iter()
        .map(|o| (o.node_id, o.owner))
        .collect())
}

/// The node with the highest perf score; ties go to the smallest id.
pub fn master_for(inventory: &Inventory, nodes: &[NodeId]) -> Result<NodeId, AllocError> {
    let mut best: Option<(u32, &NodeId)> = None;
    for id in nodes {
        let perf = inventory
            .get(id)
            .ok_or_else(|| AllocError::UnknownNode(id.clone()))?
            .spec
            .perf_score;
        let better = match best {
            None => true,
            Some((bp, bid)) => perf > bp || (perf == bp && id < bid),
        };
        if better {
            best = Some((perf, id));
        }
    }
    best.map(|(_, id)| id.clone())
        .ok_or(AllocError::InsufficientFreeNodes {
            requested: 1,
            free: 0,
        })
}

/// Stamps every assigned node with a new block inside `txn`. If any node is
/// already owned the whole reservation fails with `RaceLost` and nothing is
/// written.
pub fn reserve_in(
    txn: &mut Txn,
    inventory: &Inventory,
    assignment: &Assignment,
    app_id: &AppId,
    period: Period,
) -> Result<Block, AllocError> {
    let master_node = master_for(inventory, &assignment.node_ids)?;
    let mut stamps = Vec::with_capacity(assignment.node_ids.len());
    for id in &assignment.node_ids {
        let own: NodeOwnership = txn
            .get(RecordKind::Node, id.as_str())?
            .ok_or_else(|| AllocError::UnknownNode(id.clone()))?;
        if own.owner.is_some() {
            return Err(AllocError::RaceLost { node: id.clone() });
        }
        stamps.push(own);
    }
    let block = Block {
        block_id: BlockId::generate(),
        app_id: app_id.clone(),
        node_ids: assignment.node_ids.clone(),
        master_node,
        period,
        released_at: None,
    };
    for mut own in stamps {
        own.owner = Some(block.block_id.clone());
        txn.put(RecordKind::Node, own.node_id.as_str(), &own)?;
    }
    txn.put(RecordKind::Block, block.block_id.as_str(), &block)?;
    Ok(block)
}

pub fn reserve(
    store: &Store,
    inventory: &Inventory,
    assignment: &Assignment,
    app_id: &AppId,
    period: Period,
) -> Result<Block, AllocError> {
    store.transact(|txn| reserve_in(txn, inventory, assignment, app_id, period))
}

/// Returns a block's nodes to the free pool. Releasing twice is a no-op.
pub fn release_in(txn: &mut Txn, block_id: &BlockId, now: Timestamp) -> Result<Block, AllocError> {
    let mut block: Block = txn
        .get(RecordKind::Block, block_id.as_str())?
        .ok_or_else(|| AllocError::UnknownBlock(block_id.clone()))?;
    if !block.is_active() {
        return Ok(block);
    }
    for id in &block.node_ids {
        if let Some(mut own) = txn.get::<NodeOwnership>(RecordKind::Node, id.as_str())? {
            if own.owner.as_ref() == Some(block_id) {
                own.owner = None;
                txn.put(RecordKind::Node, id.as_str(), &own)?;
            }
        }
    }
    block.released_at = Some(now);
    txn.put(RecordKind::Block, block_id.as_str(), &block)?;
    Ok(block)
}

pub fn release(store: &Store, block_id: &BlockId, now: Timestamp) -> Result<Block, AllocError> {
    store.transact(|txn| release_in(txn, block_id, now))
}
