//! On-disk run state: the manifest, the per-run writer lock and the event log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Manifest, Stage};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_BACKUP: &str = "manifest.json.bak";
pub const EVENTS_FILE: &str = "events.jsonl";
const LOCK_FILE: &str = ".lock";

pub(crate) fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Writes through a sibling temp file and a rename, so readers never see a
/// partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).at(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// The previous manifest is kept as a backup before each write.
pub(crate) fn save_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    if path.exists() {
        let backup = dir.join(MANIFEST_BACKUP);
        fs::copy(&path, &backup).at(&backup)?;
    }
    write_json(&path, manifest)
}

pub(crate) fn load_manifest(dir: &Path, run_id: &str) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("run {run_id}")));
    }
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(corrupt(dir, run_id, "manifest.json is missing".into()));
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    serde_json::from_slice(&bytes).map_err(|e| corrupt(dir, run_id, e.to_string()))
}

fn corrupt(dir: &Path, run_id: &str, message: String) -> Error {
    let last_valid = match read_json::<Manifest>(&dir.join(MANIFEST_BACKUP)) {
        Ok(m) => format!("{MANIFEST_BACKUP} at stage {} (revision {})", m.stage, m.revision),
        Err(_) => "none".into(),
    };
    Error::CorruptManifest {
        run_id: run_id.to_string(),
        message,
        last_valid,
    }
}

/// A stored file referenced from the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Hashes the files at `paths` (relative to `dir`); directories are walked
/// recursively in name order and missing paths are skipped.
pub(crate) fn collect_artifacts(dir: &Path, paths: &[String]) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    for p in paths {
        walk(dir, &dir.join(p), &mut files)?;
    }
    files.sort();
    files.dedup();
    files
        .into_iter()
        .map(|rel| {
            let full = dir.join(&rel);
            let bytes = fs::read(&full).at(&full)?;
            Ok(Artifact {
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
                path: rel,
            })
        })
        .collect()
}

fn walk(root: &Path, path: &Path, out: &mut Vec<String>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path).at(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>().at(path)?;
        entries.sort();
        for e in entries {
            walk(root, &e, out)?;
        }
    } else if path.is_file() {
        let rel = path.strip_prefix(root).expect("artifact under run dir");
        out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
    }
    Ok(())
}

/// Exclusive writer lock on a run, released on drop.
#[derive(Debug)]
pub struct RunLock {
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path, run_id: &str) -> Result<RunLock> {
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path).at(&path)?;
        match file.try_lock() {
            Ok(()) => Ok(RunLock { _file: file }),
            Err(fs::TryLockError::WouldBlock) => Err(Error::Busy(run_id.to_string())),
            Err(fs::TryLockError::Error(e)) => Err(Error::io(path, e)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RunCreated,
    StageStarted,
    Progress,
    StageCompleted,
    StageFailed,
    StageInterrupted,
    GatePending,
    GateResolved,
    RunDone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub stage: Stage,
    pub kind: EventKind,
    #[serde(default)]
    pub payload: Value,
}

/// Append side of `events.jsonl`. Only the holder of the run lock appends, so
/// sequence numbers read from the file at open time stay valid.
pub(crate) struct EventLog {
    path: PathBuf,
    last_seq: Mutex<u64>,
}

impl EventLog {
    pub fn open(dir: &Path) -> Result<EventLog> {
        let path = dir.join(EVENTS_FILE);
        let last_seq = read_events(&path, 0)?.last().map(|e| e.seq).unwrap_or(0);
        Ok(EventLog {
            path,
            last_seq: Mutex::new(last_seq),
        })
    }

    pub fn append(&self, stage: Stage, kind: EventKind, payload: Value) -> Result<u64> {
        let mut last = self.last_seq.lock().unwrap();
        let event = Event {
            seq: *last + 1,
            stage,
            kind,
            payload,
        };
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).at(&self.path)?;
        f.write_all(&line).at(&self.path)?;
        *last = event.seq;
        Ok(event.seq)
    }
}

/// Events with `seq > after`, ascending. A trailing partial line (a write in
/// progress) is ignored.
pub fn read_events(path: &Path, after: u64) -> Result<Vec<Event>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).at(path)?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        let event: Event = serde_json::from_str(line.trim_end())?;
        if event.seq > after {
            out.push(event);
        }
    }
    Ok(out)
}
