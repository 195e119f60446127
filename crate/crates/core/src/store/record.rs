use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Application,
    Block,
    Job,
    Node,
    Artifact,
    Telemetry,
    Audit,
}

impl RecordKind {
    pub const ALL: [RecordKind; 7] = [
        RecordKind::Application,
        RecordKind::Block,
        RecordKind::Job,
        RecordKind::Node,
        RecordKind::Artifact,
        RecordKind::Telemetry,
        RecordKind::Audit,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            RecordKind::Application => "application",
            RecordKind::Block => "block",
            RecordKind::Job => "job",
            RecordKind::Node => "node",
            RecordKind::Artifact => "artifact",
            RecordKind::Telemetry => "telemetry",
            RecordKind::Audit => "audit",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub kind: RecordKind,
    pub id: String,
}

impl RecordKey {
    pub fn new(kind: RecordKind, id: impl Into<String>) -> Self {
        RecordKey {
            kind,
            id: id.into(),
        }
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind, self.id)
    }
}

/// One stored value. `version` starts at 1 and grows by one per committed write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub key: RecordKey,
    pub version: u64,
    pub body: Value,
}

/// Serializes with sorted object keys so equal values give equal bytes.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, StoreError> {
    // serde_json's default Map is a BTreeMap, so going through Value sorts keys.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_vec(&v)?)
}

/// Ids become file names; anything outside a conservative set is rejected.
pub fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadId(id.to_owned()))
    }
}
