//! Durable, transactional storage for the control plane.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! wal.ndjson                      committed transactions, one JSON object per line
//! records/<kind>/<id>.json        latest committed version of each record
//! streams/<stream>.ndjson         append-only telemetry and audit events
//! artifacts/<job_id>              raw result archives
//! ```
//!
//! A commit is durable once its WAL line is synced; record files are then
//! rewritten with write-to-temp-and-rename. Opening the store replays any WAL
//! entry newer than the record file and drops a torn final line.
//!
//! Concurrency is optimistic: a [`Txn`] reads from an immutable snapshot and
//! remembers the version of everything it read. At commit the versions are
//! re-checked under the commit lock; any change yields [`StoreError::Conflict`]
//! and nothing is written.

mod record;
mod stream;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use record::{canonical_json, check_id, Record, RecordKey, RecordKind};
pub use stream::{Stream, StreamEntry};

use stream::StreamLog;

/// How many times [`Store::transact`] re-runs a closure that hit a conflict.
pub const MAX_TXN_ATTEMPTS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("transaction conflict")]
    Conflict,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid record id {0:?}")]
    BadId(String),
    #[error("corrupt store file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("store crashed (injected fault); reopen to recover")]
    Crashed,
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Where an injected crash stops a commit. Test hook for recovery checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// Nothing reached disk.
    BeforeWal,
    /// Part of the WAL line was written, without its newline.
    TornWal,
    /// The WAL line is durable but no record file was touched.
    AfterWal,
    /// Some record files were rewritten, others not.
    MidApply,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WalEntry {
    seq: u64,
    writes: Vec<Record>,
}

#[derive(Debug, Clone, Default)]
struct Snapshot {
    records: BTreeMap<RecordKey, Arc<Record>>,
    /// Bumped whenever a record of the kind is created; guards `list` reads.
    kind_versions: BTreeMap<RecordKind, u64>,
}

impl Snapshot {
    fn version(&self, key: &RecordKey) -> u64 {
        self.records.get(key).map_or(0, |r| r.version)
    }
}

struct CommitLog {
    wal: File,
    next_seq: u64,
}

struct Inner {
    root: PathBuf,
    sync: bool,
    snapshot: RwLock<Arc<Snapshot>>,
    commit: Mutex<CommitLog>,
    telemetry: Mutex<StreamLog>,
    audit: Mutex<StreamLog>,
    crash: Mutex<Option<CrashPoint>>,
    poisoned: AtomicBool,
}

/// Handle to an open store. Cheap to clone; clones share state.
#[derive(Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

/// Summary of a WAL audit; see [`Store::verify`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    pub transactions: u64,
    pub records: usize,
}

/// A unit of work against one snapshot.
pub struct Txn {
    snapshot: Arc<Snapshot>,
    reads: BTreeMap<RecordKey, u64>,
    kind_reads: BTreeMap<RecordKind, u64>,
    writes: BTreeMap<RecordKey, Value>,
}

impl Txn {
    /// Reads a record as of the snapshot, seeing this transaction's own writes.
    pub fn get<T: DeserializeOwned>(
        &mut self,
        kind: RecordKind,
        id: &str,
    ) -> Result<Option<T>, StoreError> {
        let key = RecordKey::new(kind, id);
        if let Some(v) = self.writes.get(&key) {
            return Ok(Some(serde_json::from_value(v.clone())?));
        }
        let version = self.snapshot.version(&key);
        self.reads.entry(key.clone()).or_insert(version);
        match self.snapshot.records.get(&key) {
            Some(r) => Ok(Some(serde_json::from_value(r.body.clone())?)),
            None => Ok(None),
        }
    }

    /// Every record of `kind`, ordered by id. Conflicts with concurrent inserts.
    pub fn list<T: DeserializeOwned>(&mut self, kind: RecordKind) -> Result<Vec<T>, StoreError> {
        let kv = self.snapshot.kind_versions.get(&kind).copied().unwrap_or(0);
        self.kind_reads.entry(kind).or_insert(kv);
        let ids: Vec<String> = self
            .snapshot
            .records
            .keys()
            .filter(|k| k.kind == kind)
            .map(|k| k.id.clone())
            .chain(
                self.writes
                    .keys()
                    .filter(|k| k.kind == kind)
                    .map(|k| k.id.clone()),
            )
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            if let Some(v) = self.get(kind, &id)? {
                out.push(v);
            }
        }
        Ok(out)
    }

    pub fn put<T: Serialize>(
        &mut self,
        kind: RecordKind,
        id: &str,
        value: &T,
    ) -> Result<(), StoreError> {
        check_id(id)?;
        let key = RecordKey::new(kind, id);
        let version = self.snapshot.version(&key);
        self.reads.entry(key.clone()).or_insert(version);
        self.writes.insert(key, serde_json::to_value(value)?);
        Ok(())
    }

    pub fn is_read_only(&self) -> bool {
        self.writes.is_empty()
    }
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Store, StoreError> {
        Store::open_with(root, true)
    }

    /// `sync = false` skips fsync calls; only for throwaway stores in tests.
    pub fn open_with(root: impl AsRef<Path>, sync: bool) -> Result<Store, StoreError> {
        let root = root.as_ref().to_path_buf();
        for kind in RecordKind::ALL {
            fs::create_dir_all(root.join("records").join(kind.dir_name()))?;
        }
        fs::create_dir_all(root.join("streams"))?;
        fs::create_dir_all(root.join("artifacts"))?;

        let mut snapshot = Snapshot::default();
        load_record_files(&root, &mut snapshot)?;

        let wal_path = root.join("wal.ndjson");
        let (entries, good_len) = read_wal(&wal_path)?;
        let mut wal = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&wal_path)?;
        if wal.metadata()?.len() != good_len {
            tracing::warn!(path = %wal_path.display(), good_len, "dropping torn WAL tail");
            wal.set_len(good_len)?;
            wal.sync_all()?;
        }
        wal.seek(SeekFrom::End(0))?;

        let mut next_seq = 1;
        for entry in &entries {
            next_seq = entry.seq + 1;
            for rec in &entry.writes {
                if rec.version > snapshot.version(&rec.key) {
                    write_record_file(&root, rec, sync)?;
                    snapshot
                        .records
                        .insert(rec.key.clone(), Arc::new(rec.clone()));
                }
            }
        }

        let telemetry = StreamLog::open(&root, Stream::Telemetry, sync)?;
        let audit = StreamLog::open(&root, Stream::Audit, sync)?;
        Ok(Store {
            inner: Arc::new(Inner {
                root,
                sync,
                snapshot: RwLock::new(Arc::new(snapshot)),
                commit: Mutex::new(CommitLog { wal, next_seq }),
                telemetry: Mutex::new(telemetry),
                audit: Mutex::new(audit),
                crash: Mutex::new(None),
                poisoned: AtomicBool::new(false),
            }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    fn check_alive(&self) -> Result<(), StoreError> {
        if self.inner.poisoned.load(Ordering::SeqCst) {
            Err(StoreError::Crashed)
        } else {
            Ok(())
        }
    }

    pub fn begin(&self) -> Txn {
        Txn {
            snapshot: self.inner.snapshot.read().clone(),
            reads: BTreeMap::new(),
            kind_reads: BTreeMap::new(),
            writes: BTreeMap::new(),
        }
    }

    /// Commits atomically or returns [`StoreError::Conflict`] with no effect.
    /// Returns the new versions of the written records.
    pub fn commit(&self, txn: Txn) -> Result<BTreeMap<RecordKey, u64>, StoreError> {
        self.check_alive()?;
        if txn.is_read_only() {
            // Reads came from one immutable snapshot, so they are already
            // consistent with the commit order at the time it was taken.
            return Ok(BTreeMap::new());
        }
        let mut log = self.inner.commit.lock();
        self.check_alive()?;
        let current = self.inner.snapshot.read().clone();

        for (key, seen) in &txn.reads {
            if current.version(key) != *seen {
                return Err(StoreError::Conflict);
            }
        }
        for (kind, seen) in &txn.kind_reads {
            if current.kind_versions.get(kind).copied().unwrap_or(0) != *seen {
                return Err(StoreError::Conflict);
            }
        }

        let writes: Vec<Record> = txn
            .writes
            .into_iter()
            .map(|(key, body)| Record {
                version: current.version(&key) + 1,
                key,
                body,
            })
            .collect();
        let entry = WalEntry {
            seq: log.next_seq,
            writes,
        };
        let mut line = canonical_json(&entry)?;
        line.push(b'\n');

        let crash = self.inner.crash.lock().take();
        if crash == Some(CrashPoint::BeforeWal) {
            return Err(self.die());
        }
        if crash == Some(CrashPoint::TornWal) {
            log.wal.write_all(&line[..line.len() / 2])?;
            log.wal.sync_data()?;
            return Err(self.die());
        }
        log.wal.write_all(&line)?;
        if self.inner.sync {
            log.wal.sync_data()?;
        }
        log.next_seq += 1;
        if crash == Some(CrashPoint::AfterWal) {
            return Err(self.die());
        }

        let mut next = (*current).clone();
        let mut versions = BTreeMap::new();
        for (i, rec) in entry.writes.iter().enumerate() {
            if crash == Some(CrashPoint::MidApply) && i * 2 >= entry.writes.len().max(1) {
                return Err(self.die());
            }
            write_record_file(&self.inner.root, rec, self.inner.sync)?;
            if !next.records.contains_key(&rec.key) {
                *next.kind_versions.entry(rec.key.kind).or_insert(0) += 1;
            }
            versions.insert(rec.key.clone(), rec.version);
            next.records.insert(rec.key.clone(), Arc::new(rec.clone()));
        }
        if crash == Some(CrashPoint::MidApply) {
            return Err(self.die());
        }
        *self.inner.snapshot.write() = Arc::new(next);
        Ok(versions)
    }

    fn die(&self) -> StoreError {
        self.inner.poisoned.store(true, Ordering::SeqCst);
        StoreError::Crashed
    }

    /// Arms a one-shot crash for the next writing commit.
    #[doc(hidden)]
    pub fn inject_crash(&self, point: CrashPoint) {
        *self.inner.crash.lock() = Some(point);
    }

    /// Runs `f` in a transaction, re-running it on conflict with fresh reads.
    pub fn transact<T, E>(&self, mut f: impl FnMut(&mut Txn) -> Result<T, E>) -> Result<T, E>
    where
        E: From<StoreError>,
    {
        for attempt in 0..MAX_TXN_ATTEMPTS {
            let mut txn = self.begin();
            let out = f(&mut txn)?;
            match self.commit(txn) {
                Ok(_) => return Ok(out),
                Err(StoreError::Conflict) => {
                    // Randomized backoff so a hot record does not starve one writer.
                    let cap_us = 20u64 << attempt.min(8);
                    std::thread::sleep(std::time::Duration::from_micros(rand::random_range(
                        0..=cap_us,
                    )));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(StoreError::Conflict.into())
    }

    pub fn get<T: DeserializeOwned>(
        &self,
        kind: RecordKind,
        id: &str,
    ) -> Result<Option<T>, StoreError> {
        self.check_alive()?;
        let snap = self.inner.snapshot.read().clone();
        match snap.records.get(&RecordKey::new(kind, id)) {
            Some(r) => Ok(Some(serde_json::from_value(r.body.clone())?)),
            None => Ok(None),
        }
    }

    pub fn version(&self, kind: RecordKind, id: &str) -> u64 {
        self.inner
            .snapshot
            .read()
            .version(&RecordKey::new(kind, id))
    }

    pub fn list<T: DeserializeOwned>(&self, kind: RecordKind) -> Result<Vec<T>, StoreError> {
        self.check_alive()?;
        let snap = self.inner.snapshot.read().clone();
        snap.records
            .values()
            .filter(|r| r.key.kind == kind)
            .map(|r| Ok(serde_json::from_value(r.body.clone())?))
            .collect()
    }

    /// All committed records, for inspection and tests.
    pub fn records(&self) -> Vec<Record> {
        self.inner
            .snapshot
            .read()
            .records
            .values()
            .map(|r| (**r).clone())
            .collect()
    }

    /// Appends to a stream; the returned sequence number is durable.
    pub fn append_event<T: Serialize>(
        &self,
        stream: Stream,
        payload: &T,
    ) -> Result<u64, StoreError> {
        self.check_alive()?;
        let value = serde_json::to_value(payload)?;
        self.stream(stream).lock().append(value)
    }

    pub fn read_stream(&self, stream: Stream) -> Result<Vec<StreamEntry>, StoreError> {
        self.stream(stream).lock().read_all()
    }

    fn stream(&self, stream: Stream) -> &Mutex<StreamLog> {
        match stream {
            Stream::Telemetry => &self.inner.telemetry,
            Stream::Audit => &self.inner.audit,
        }
    }

    pub fn put_artifact(&self, job_id: &str, bytes: &[u8]) -> Result<(), StoreError> {
        self.check_alive()?;
        check_id(job_id)?;
        write_atomic(
            &self.inner.root.join("artifacts").join(job_id),
            bytes,
            self.inner.sync,
        )
    }

    pub fn get_artifact(&self, job_id: &str) -> Result<Vec<u8>, StoreError> {
        check_id(job_id)?;
        match fs::read(self.inner.root.join("artifacts").join(job_id)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(StoreError::NotFound(format!("artifact {job_id}")))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Re-reads the WAL and record files from disk and checks that every
    /// record's version history is gapless, starts at 1, and ends at the
    /// version held in its record file.
    pub fn verify(root: impl AsRef<Path>) -> Result<VerifyReport, StoreError> {
        let root = root.as_ref();
        let wal_path = root.join("wal.ndjson");
        let (entries, _) = read_wal(&wal_path)?;
        let mut last: HashMap<RecordKey, u64> = HashMap::new();
        let mut prev_seq = 0;
        for entry in &entries {
            if entry.seq != prev_seq + 1 {
                return Err(corrupt(
                    &wal_path,
                    format!("transaction seq {} follows {prev_seq}", entry.seq),
                ));
            }
            prev_seq = entry.seq;
            for rec in &entry.writes {
                let expected = last.get(&rec.key).copied().unwrap_or(0) + 1;
                if rec.version != expected {
                    return Err(corrupt(
                        &wal_path,
                        format!(
                            "{} jumps to v{} (expected v{expected})",
                            rec.key, rec.version
                        ),
                    ));
                }
                last.insert(rec.key.clone(), rec.version);
            }
        }
        let mut files = Snapshot::default();
        load_record_files(root, &mut files)?;
        for (key, rec) in &files.records {
            match last.get(key) {
                Some(v) if *v >= rec.version => {}
                _ => {
                    return Err(corrupt(
                        &wal_path,
                        format!("record file {key} v{} has no WAL history", rec.version),
                    ))
                }
            }
        }
        Ok(VerifyReport {
            transactions: prev_seq,
            records: last.len(),
        })
    }
}

fn corrupt(path: &Path, reason: String) -> StoreError {
    StoreError::Corrupt {
        path: path.to_path_buf(),
        reason,
    }
}

fn record_path(root: &Path, key: &RecordKey) -> PathBuf {
    root.join("records")
        .join(key.kind.dir_name())
        .join(format!("{}.json", key.id))
}

fn write_record_file(root: &Path, rec: &Record, sync: bool) -> Result<(), StoreError> {
    write_atomic(&record_path(root, &rec.key), &canonical_json(rec)?, sync)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8], sync: bool) -> Result<(), StoreError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        if sync {
            f.sync_data()?;
        }
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_record_files(root: &Path, snapshot: &mut Snapshot) -> Result<(), StoreError> {
    for kind in RecordKind::ALL {
        let dir = root.join("records").join(kind.dir_name());
        let Ok(read) = fs::read_dir(&dir) else {
            continue;
        };
        for entry in read {
            let path = entry?.path();
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            if name.ends_with(".tmp") {
                // Leftover from an interrupted write; the WAL still has the data.
                let _ = fs::remove_file(&path);
                continue;
            }
            if !name.ends_with(".json") {
                continue;
            }
            let bytes = fs::read(&path)?;
            let rec: Record =
                serde_json::from_slice(&bytes).map_err(|e| corrupt(&path, e.to_string()))?;
            if rec.key.kind != kind {
                return Err(corrupt(
                    &path,
                    "record kind does not match its directory".into(),
                ));
            }
            *snapshot.kind_versions.entry(kind).or_insert(0) += 1;
            snapshot.records.insert(rec.key.clone(), Arc::new(rec));
        }
    }
    Ok(())
}

/// Parses the WAL, returning its entries and the byte length of the intact
/// prefix. Only the final line may be damaged.
fn read_wal(path: &Path) -> Result<(Vec<WalEntry>, u64), StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut entries = Vec::new();
    let mut good = 0u64;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        let complete = buf.last() == Some(&b'\n');
        match serde_json::from_slice::<WalEntry>(&buf) {
            Ok(entry) if complete => {
                entries.push(entry);
                good += n as u64;
            }
            _ => {
                // A bad line is tolerated only at the very end.
                let mut rest = Vec::new();
                std::io::Read::read_to_end(&mut reader, &mut rest)?;
                if !rest.is_empty() {
                    return Err(corrupt(
                        path,
                        format!("unparseable WAL line at byte {good}"),
                    ));
                }
                break;
            }
        }
    }
    Ok((entries, good))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        (dir, s)
    }

    fn put(s: &Store, id: &str, v: i64) {
        let mut t = s.begin();
        t.put(RecordKind::Job, id, &json!({ "v": v })).unwrap();
        s.commit(t).unwrap();
    }

    #[test]
    fn versions_increment_by_one() {
        let (_d, s) = store();
        put(&s, "a", 1);
        put(&s, "a", 2);
        put(&s, "a", 3);
        assert_eq!(s.version(RecordKind::Job, "a"), 3);
        assert_eq!(
            s.get::<Value>(RecordKind::Job, "a").unwrap(),
            Some(json!({"v": 3}))
        );
    }

    #[test]
    fn stale_write_conflicts_and_lands_nothing() {
        let (_d, s) = store();
        put(&s, "a", 1);
        let mut t1 = s.begin();
        let _: Option<Value> = t1.get(RecordKind::Job, "a").unwrap();
        t1.put(RecordKind::Job, "a", &json!({"v": 10})).unwrap();
        t1.put(RecordKind::Job, "b", &json!({"v": 10})).unwrap();
        put(&s, "a", 2);
        assert!(matches!(s.commit(t1), Err(StoreError::Conflict)));
        assert_eq!(
            s.get::<Value>(RecordKind::Job, "a").unwrap(),
            Some(json!({"v": 2}))
        );
        assert_eq!(s.get::<Value>(RecordKind::Job, "b").unwrap(), None);
    }

    #[test]
    fn read_only_always_commits() {
        let (_d, s) = store();
        put(&s, "a", 1);
        let mut t = s.begin();
        let _: Option<Value> = t.get(RecordKind::Job, "a").unwrap();
        put(&s, "a", 2);
        assert!(s.commit(t).is_ok());
    }

    #[test]
    fn list_conflicts_with_concurrent_insert() {
        let (_d, s) = store();
        put(&s, "a", 1);
        let mut t = s.begin();
        let all: Vec<Value> = t.list(RecordKind::Job).unwrap();
        assert_eq!(all.len(), 1);
        t.put(RecordKind::Block, "summary", &json!({"jobs": 1}))
            .unwrap();
        put(&s, "b", 1);
        assert!(matches!(s.commit(t), Err(StoreError::Conflict)));
    }

    #[test]
    fn txn_sees_own_writes() {
        let (_d, s) = store();
        let mut t = s.begin();
        t.put(RecordKind::Job, "x", &json!(5)).unwrap();
        assert_eq!(
            t.get::<Value>(RecordKind::Job, "x").unwrap(),
            Some(json!(5))
        );
        assert_eq!(t.list::<Value>(RecordKind::Job).unwrap(), vec![json!(5)]);
    }

    #[test]
    fn transact_retries_conflicts() {
        let (_d, s) = store();
        put(&s, "ctr", 0);
        std::thread::scope(|sc| {
            for _ in 0..8 {
                sc.spawn(|| {
                    for _ in 0..25 {
                        s.transact(|t| {
                            let cur: Value = t.get(RecordKind::Job, "ctr")?.unwrap();
                            let v = cur["v"].as_i64().unwrap();
                            t.put(RecordKind::Job, "ctr", &json!({ "v": v + 1 }))
                        })
                        .unwrap();
                    }
                });
            }
        });
        assert_eq!(
            s.get::<Value>(RecordKind::Job, "ctr").unwrap(),
            Some(json!({"v": 200}))
        );
        assert_eq!(s.version(RecordKind::Job, "ctr"), 201);
    }

    #[test]
    fn reopen_preserves_everything() {
        let (d, s) = store();
        put(&s, "a", 1);
        put(&s, "a", 2);
        s.append_event(Stream::Audit, &json!({"e": 1})).unwrap();
        s.put_artifact("job-1", b"\x00bytes\xff").unwrap();
        drop(s);
        let s = Store::open(d.path()).unwrap();
        assert_eq!(s.version(RecordKind::Job, "a"), 2);
        assert_eq!(s.read_stream(Stream::Audit).unwrap().len(), 1);
        assert_eq!(s.get_artifact("job-1").unwrap(), b"\x00bytes\xff");
        assert_eq!(Store::verify(d.path()).unwrap().transactions, 2);
    }

    #[test]
    fn artifact_reads_are_repeatable_and_missing_is_not_found() {
        let (_d, s) = store();
        s.put_artifact("job-2", b"abc").unwrap();
        assert_eq!(
            s.get_artifact("job-2").unwrap(),
            s.get_artifact("job-2").unwrap()
        );
        assert!(matches!(
            s.get_artifact("job-nope"),
            Err(StoreError::NotFound(_))
        ));
    }

    #[test]
    fn every_crash_point_recovers_all_or_nothing() {
        for point in [
            CrashPoint::BeforeWal,
            CrashPoint::TornWal,
            CrashPoint::AfterWal,
            CrashPoint::MidApply,
        ] {
            let (d, s) = store();
            put(&s, "a", 1);
            s.inject_crash(point);
            let mut t = s.begin();
            for id in ["a", "b", "c", "d"] {
                t.put(RecordKind::Job, id, &json!({"v": 9})).unwrap();
            }
            assert!(matches!(s.commit(t), Err(StoreError::Crashed)));
            assert!(matches!(
                s.get::<Value>(RecordKind::Job, "a"),
                Err(StoreError::Crashed)
            ));
            drop(s);
            let s = Store::open(d.path()).unwrap();
            let landed = matches!(point, CrashPoint::AfterWal | CrashPoint::MidApply);
            for id in ["b", "c", "d"] {
                assert_eq!(
                    s.get::<Value>(RecordKind::Job, id).unwrap().is_some(),
                    landed,
                    "{point:?} {id}"
                );
            }
            assert_eq!(s.version(RecordKind::Job, "a"), if landed { 2 } else { 1 });
            Store::verify(d.path()).unwrap();
            put(&s, "a", 3);
            Store::verify(d.path()).unwrap();
        }
    }

    #[test]
    fn garbage_in_the_middle_of_the_wal_is_corruption() {
        let (d, s) = store();
        put(&s, "a", 1);
        drop(s);
        let wal = d.path().join("wal.ndjson");
        let mut text = fs::read_to_string(&wal).unwrap();
        text.insert_str(0, "{not json}\n");
        fs::write(&wal, text).unwrap();
        assert!(matches!(
            Store::open(d.path()),
            Err(StoreError::Corrupt { .. })
        ));
    }
}
