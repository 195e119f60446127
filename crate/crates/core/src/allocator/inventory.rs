use std::collections::BTreeSet;
use std::path::Path;

use crate::domain::{validate_tiers, DomainError, NodeId, NodeSpecClass};

/// One line of the inventory file: `node_id,tier_label,perf_score,mem_mb`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InventoryEntry {
    pub node_id: NodeId,
    pub spec: NodeSpecClass,
}

/// The static hardware list the cluster boots with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inventory {
    entries: Vec<InventoryEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum InventoryError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate node id {0}")]
    Duplicate(NodeId),
    #[error("inventory is empty")]
    Empty,
    #[error(transparent)]
    Tier(#[from] DomainError),
    #[error("reading inventory: {0}")]
    Io(#[from] std::io::Error),
}

impl Inventory {
    pub fn new(entries: Vec<InventoryEntry>) -> Result<Self, InventoryError> {
        if entries.is_empty() {
            return Err(InventoryError::Empty);
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(&e.node_id) {
                return Err(InventoryError::Duplicate(e.node_id.clone()));
            }
        }
        validate_tiers(entries.iter().map(|e| &e.spec))?;
        Ok(Inventory { entries })
    }

    pub fn parse(text: &str) -> Result<Self, InventoryError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| InventoryError::Parse {
                line: idx + 1,
                reason: reason.to_owned(),
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [id, label, perf, mem] = fields[..] else {
                return Err(err("expected 4 comma-separated fields"));
            };
            if id.is_empty() || label.is_empty() {
                return Err(err("empty node id or tier label"));
            }
            let perf_score = perf
                .parse()
                .map_err(|_| err("perf_score is not a positive integer"))?;
            let mem_mb = mem
                .parse()
                .map_err(|_| err("mem_mb is not a positive integer"))?;
            entries.push(InventoryEntry {
                node_id: id.into(),
                spec: NodeSpecClass {
                    label: label.to_owned(),
                    perf_score,
                    mem_mb,
                },
            });
        }
        Inventory::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, InventoryError> {
        Inventory::parse(&std::fs::read_to_string(path)?)
    }

    pub fn entries(&self) -> &[InventoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, node: &NodeId) -> Option<&InventoryEntry> {
        self.entries.iter().find(|e| &e.node_id == node)
    }

    /// Renders back to the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# node_id,tier_label,perf_score,mem_mb\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.node_id, e.spec.label, e.spec.perf_score, e.spec.mem_mb
            ));
        }
        out
    }

    /// A mixed-tier inventory of `n` nodes named `n00`, `n01`, ...
    pub fn demo(n: usize) -> Self {
        const TIERS: [(&str, u32, u32); 4] = [
            ("i486", 3, 64),
            ("pentium3", 12, 256),
            ("athlon-xp", 25, 512),
            ("athlon64", 40, 1024),
        ];
        let entries = (0..n)
            .map(|i| {
                let (label, perf, mem) = TIERS[(i * 7 + i / 4) % TIERS.len()];
                InventoryEntry {
                    node_id: format!("n{i:02}").into(),
                    spec: NodeSpecClass {
                        label: label.to_owned(),
                        perf_score: perf,
                        mem_mb: mem,
                    },
                }
            })
            .collect();
        Inventory::new(entries).expect("demo inventory is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_format() {
        let inv =
            Inventory::parse("# comment\nn1,i486,3,64\n\n n2 , athlon , 40 , 1024 \n").unwrap();
        assert_eq!(inv.len(), 2);
        let n2 = inv.get(&"n2".into()).unwrap();
        assert_eq!(n2.spec.label, "athlon");
        assert_eq!(n2.spec.perf_score, 40);
        assert_eq!(n2.spec.mem_mb, 1024);
    }

    #[test]
    fn round_trips_through_text() {
        let inv = Inventory::demo(10);
        assert_eq!(Inventory::parse(&inv.to_text()).unwrap(), inv);
    }

    #[test]
    fn demo_is_heterogeneous() {
        let inv = Inventory::demo(10);
        let tiers: BTreeSet<_> = inv.entries().iter().map(|e| e.spec.perf_score).collect();
        assert!(tiers.len() >= 2);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(
            Inventory::parse("n1,i486,3"),
            Err(InventoryError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Inventory::parse("n1,i486,-3,64"),
            Err(InventoryError::Parse { .. })
        ));
        assert!(matches!(
            Inventory::parse("n1,a,3,64\nn1,a,3,64"),
            Err(InventoryError::Duplicate(_))
        ));
        assert!(matches!(
            Inventory::parse("n1,a,3,64\nn2,b,3,64"),
            Err(InventoryError::Tier(_))
        ));
        assert!(matches!(
            Inventory::parse("# nothing\n"),
            Err(InventoryError::Empty)
        ));
    }
}
