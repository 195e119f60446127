//! Fixtures shared by the benchmarks.

use pubcluster_core::{NodeRecord, NodeSpecClass, PowerState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TIERS: [(&str, u32, u32); 4] = [
    ("A", 40, 4096),
    ("B", 30, 2048),
    ("C", 20, 2048),
    ("D", 10, 1024),
];

/// `size` nodes drawn from four tiers, roughly a fifth already owned.
pub fn inventory(size: usize, seed: u64) -> Vec<NodeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|i| {
            let (label, perf, mem) = TIERS[rng.random_range(0..TIERS.len())];
            NodeRecord {
                node_id: format!("n{i:03}").into(),
                spec: NodeSpecClass {
                    label: label.into(),
                    perf_score: perf,
                    mem_mb: mem,
                },
                power: PowerState::Off,
                owner: rng.random_bool(0.2).then(|| "blk-bench".into()),
                temperature_c: 25.0,
                load: 0.0,
            }
        })
        .collect()
}

/// A small JSON body resembling an application record.
pub fn record_body(i: u64) -> serde_json::Value {
    serde_json::json!({
        "id": format!("app-{i}"),
        "state": "submitted",
        "nodes_requested": 1 + i % 8,
        "note": "x".repeat(128),
    })
}
