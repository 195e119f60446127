use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{canonical_json, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Telemetry,
    Audit,
}

impl Stream {
    fn file_name(self) -> &'static str {
        match self {
            Stream::Telemetry => "telemetry.ndjson",
            Stream::Audit => "audit.ndjson",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub seq: u64,
    pub payload: Value,
}

pub(super) struct StreamLog {
    path: PathBuf,
    file: File,
    next_seq: u64,
    sync: bool,
}

impl StreamLog {
    pub(super) fn open(root: &Path, stream: Stream, sync: bool) -> Result<StreamLog, StoreError> {
        let path = root.join("streams").join(stream.file_name());
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&path)?;
        let (entries, good) = scan(&path)?;
        if file.metadata()?.len() != good {
            file.set_len(good)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        let next_seq = entries.last().map_or(1, |e| e.seq + 1);
        Ok(StreamLog {
            path,
            file,
            next_seq,
            sync,
        })
    }

    pub(super) fn append(&mut self, payload: Value) -> Result<u64, StoreError> {
        let seq = self.next_seq;
        let mut line = canonical_json(&StreamEntry { seq, payload })?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        if self.sync {
            self.file.sync_data()?;
        }
        self.next_seq += 1;
        Ok(seq)
    }

    pub(super) fn read_all(&self) -> Result<Vec<StreamEntry>, StoreError> {
        Ok(scan(&self.path)?.0)
    }
}

/// Reads intact lines; a torn final line (crash mid-append) is ignored.
fn scan(path: &Path) -> Result<(Vec<StreamEntry>, u64), StoreError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut good = 0u64;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 || buf.last() != Some(&b'\n') {
            break;
        }
        match serde_json::from_slice::<StreamEntry>(&buf) {
            Ok(e) => {
                out.push(e);
                good += n as u64;
            }
            Err(_) => break,
        }
    }
    Ok((out, good))
}
