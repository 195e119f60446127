//! Job bundles and result artifacts, both POSIX ustar archives.
//!
//! A job bundle carries `job.toml`, a `key = value` manifest:
//!
//! ```text
//! runtime_s = 2                 # positive whole seconds
//! output = "ok from {rank}"     # {rank} is replaced with the rank number
//! failure_mode = none           # none | nonzero_exit | runaway
//! fail_rank = 2                 # optional; nonzero_exit only hits this rank
//! ```
//!
//! plus any payload files, which are staged alongside it.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::keyvalue::KvMap;

pub const MANIFEST_NAME: &str = "job.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    None,
    NonzeroExit,
    /// Never terminates on its own.
    Runaway,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimJobScript {
    pub declared_runtime_s: u64,
    pub declared_output: String,
    pub failure_mode: FailureMode,
    pub fail_rank: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("archive corrupt: {0}")]
pub struct ArchiveError(pub String);

impl SimJobScript {
    pub fn new(runtime_s: u64, output: &str) -> Self {
        SimJobScript {
            declared_runtime_s: runtime_s,
            declared_output: output.to_owned(),
            failure_mode: FailureMode::None,
            fail_rank: None,
        }
    }

    pub fn failing(mut self, rank: Option<u32>) -> Self {
        self.failure_mode = FailureMode::NonzeroExit;
        self.fail_rank = rank;
        self
    }

    pub fn runaway(mut self) -> Self {
        self.failure_mode = FailureMode::Runaway;
        self
    }

    pub fn parse(text: &str) -> Result<Self, ArchiveError> {
        let bad = |m: String| ArchiveError(format!("{MANIFEST_NAME}: {m}"));
        let kv = KvMap::parse(text).map_err(|e| bad(e.to_string()))?;
        kv.reject_unknown(&["runtime_s", "output", "failure_mode", "fail_rank"])
            .map_err(|e| bad(e.to_string()))?;
        let runtime: u64 = kv
            .require("runtime_s")
            .map_err(|e| bad(e.to_string()))?
            .parse()
            .map_err(|_| bad("runtime_s must be a whole number".into()))?;
        if runtime == 0 {
            return Err(bad("runtime_s must be positive".into()));
        }
        let failure_mode = match kv.get("failure_mode").unwrap_or("none") {
            "none" => FailureMode::None,
            "nonzero_exit" => FailureMode::NonzeroExit,
            "runaway" => FailureMode::Runaway,
            other => return Err(bad(format!("unknown failure_mode {other:?}"))),
        };
        let fail_rank = kv
            .parse_opt::<u32>("fail_rank")
            .map_err(|e| bad(e.to_string()))?;
        Ok(SimJobScript {
            declared_runtime_s: runtime,
            declared_output: kv.get("output").unwrap_or("").to_owned(),
            failure_mode,
            fail_rank,
        })
    }

    pub fn to_text(&self) -> String {
        let mode = match self.failure_mode {
            FailureMode::None => "none",
            FailureMode::NonzeroExit => "nonzero_exit",
            FailureMode::Runaway => "runaway",
        };
        let mut s = format!(
            "runtime_s = {}\noutput = \"{}\"\nfailure_mode = {mode}\n",
            self.declared_runtime_s, self.declared_output
        );
        if let Some(r) = self.fail_rank {
            s.push_str(&format!("fail_rank = {r}\n"));
        }
        s
    }

    /// Exit status the given rank ends with, or `None` if it never ends.
    pub fn exit_code_for(&self, rank: u32) -> Option<i32> {
        match self.failure_mode {
            FailureMode::None => Some(0),
            FailureMode::NonzeroExit => Some(match self.fail_rank {
                Some(r) if r != rank => 0,
                _ => 1,
            }),
            FailureMode::Runaway => None,
        }
    }

    pub fn output_for(&self, rank: u32) -> String {
        format!(
            "{}\n",
            self.declared_output.replace("{rank}", &rank.to_string())
        )
    }
}

/// Packs files into a ustar archive with fixed metadata, so equal inputs
/// give equal bytes.
pub fn pack<'a>(files: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> Vec<u8> {
    let mut builder = tar::Builder::new(Vec::new());
    for (name, data) in files {
        let mut header = tar::Header::new_ustar();
        header.set_size(data.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_entry_type(tar::EntryType::Regular);
        builder
            .append_data(&mut header, name, data)
            .expect("writing to a Vec cannot fail");
    }
    builder.into_inner().expect("writing to a Vec cannot fail")
}

/// Regular-file entries of an archive, by path.
pub fn unpack(bytes: &[u8]) -> Result<BTreeMap<String, Vec<u8>>, ArchiveError> {
    if bytes.is_empty() {
        return Err(ArchiveError("empty archive".into()));
    }
    let mut archive = tar::Archive::new(bytes);
    let mut out = BTreeMap::new();
    let entries = archive.entries().map_err(|e| ArchiveError(e.to_string()))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| ArchiveError(e.to_string()))?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let path = entry.path().map_err(|e| ArchiveError(e.to_string()))?;
        let name = path.to_string_lossy().into_owned();
        if name.starts_with('/') || name.split('/').any(|seg| seg == "..") {
            return Err(ArchiveError(format!("unsafe path {name:?}")));
        }
        let mut data = Vec::new();
        entry
            .read_to_end(&mut data)
            .map_err(|e| ArchiveError(e.to_string()))?;
        out.insert(name, data);
    }
    Ok(out)
}

/// Builds a job bundle from a script and optional payload files.
pub fn build_job_archive(script: &SimJobScript, payload: &[(&str, &[u8])]) -> Vec<u8> {
    let manifest = script.to_text();
    let mut files: Vec<(&str, &[u8])> = vec![(MANIFEST_NAME, manifest.as_bytes())];
    files.extend_from_slice(payload);
    pack(files)
}

/// Reads and validates the manifest of a job bundle.
pub fn read_job_archive(bytes: &[u8]) -> Result<SimJobScript, ArchiveError> {
    let files = unpack(bytes)?;
    script_from_files(&files)
}

pub(crate) fn script_from_files(
    files: &BTreeMap<String, Vec<u8>>,
) -> Result<SimJobScript, ArchiveError> {
    let raw = files
        .get(MANIFEST_NAME)
        .ok_or_else(|| ArchiveError(format!("no {MANIFEST_NAME} in archive")))?;
    let text = std::str::from_utf8(raw)
        .map_err(|_| ArchiveError(format!("{MANIFEST_NAME} is not UTF-8")))?;
    SimJobScript::parse(text)
}
