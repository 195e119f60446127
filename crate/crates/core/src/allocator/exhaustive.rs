use itertools::Itertools;

use super::{free_sorted, score, AllocError, AllocationRequest, Assignment};
use crate::domain::NodeRecord;

/// Largest number of subsets the oracle will enumerate.
pub const MAX_EXHAUSTIVE_SUBSETS: u128 = 1_000_000;

pub(crate) fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return acc;
        }
    }
    acc
}

/// Enumerates every free subset of the requested size and returns one with
/// maximal fitness. Ties go to the lexicographically smallest sorted id list.
pub fn allocate_exhaustive(
    request: &AllocationRequest,
    inventory: &[NodeRecord],
) -> Result<Assignment, AllocError> {
    let free = free_sorted(inventory, request)?;
    let subsets = binomial(free.len(), request.node_count);
    if subsets > MAX_EXHAUSTIVE_SUBSETS {
        return Err(AllocError::SearchSpaceTooLarge { subsets });
    }
    let perf: Vec<u32> = free.iter().map(|n| n.spec.perf_score).collect();

    // Combinations come out in lexicographic index order and `free` is sorted
    // by id, so keeping only strict improvements implements the tie-break.
    let mut best: Option<(f64, Vec<usize>)> = None;
    for combo in (0..free.len()).combinations(request.node_count) {
        let f = score(combo.iter().map(|&i| perf[i]), request.min_perf_score);
        if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
            best = Some((f, combo));
        }
    }
    let (fitness, idx) = best.expect("at least one subset exists");
    Ok(Assignment {
        node_ids: idx.into_iter().map(|i| free[i].node_id.clone()).collect(),
        fitness,
    })
}
