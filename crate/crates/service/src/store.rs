//! Append-only annotation log with an in-memory current-state index.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use toothlabel::study::{AnnotationRecord, AnnotationSet, StudyError};

use crate::ServiceError;

/// One log line: the record plus the time it was received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    #[serde(flatten)]
    pub record: AnnotationRecord,
    pub timestamp_ms: u64,
}

pub struct AnnotationStore {
    path: Option<PathBuf>,
    writer: Mutex<Option<File>>,
    state: RwLock<State>,
}

struct State {
    current: AnnotationSet,
    appended: usize,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Rebuilds the current state from log lines.
pub fn replay(entries: &[LogEntry], k: usize) -> Result<AnnotationSet, StudyError> {
    AnnotationSet::from_records(entries.iter().map(|e| e.record.clone()), k)
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ServiceError::io(path, e)),
    };
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ServiceError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| {
            ServiceError::Config(format!("{}: line {}: {e}", path.display(), i + 1))
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

impl AnnotationStore {
    pub fn in_memory(k: usize) -> Self {
        AnnotationStore {
            path: None,
            writer: Mutex::new(None),
            state: RwLock::new(State {
                current: AnnotationSet::new(k),
                appended: 0,
            }),
        }
    }

    /// Opens (or creates) the log at `path` and replays it.
    pub fn open(path: &Path, k: usize) -> Result<Self, ServiceError> {
        let entries = read_log(path)?;
        let current = replay(&entries, k)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ServiceError::io(path, e))?;
        Ok(AnnotationStore {
            path: Some(path.to_path_buf()),
            writer: Mutex::new(Some(file)),
            state: RwLock::new(State {
                current,
                appended: entries.len(),
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Appends one record and updates the index. Validation happens before
    /// anything is written, so a rejected record leaves no trace.
    pub fn append(&self, record: AnnotationRecord) -> Result<LogEntry, ServiceError> {
        let entry = LogEntry {
            record,
            timestamp_ms: now_ms(),
        };
        let mut writer = self.writer.lock().expect("writer lock");
        let mut state = self.state.write().expect("state lock");
        state.current.validate(&entry.record)?;
        if let Some(file) = writer.as_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes") + "\n";
            let path = self.path.as_deref().unwrap_or(Path::new("<log>"));
            file.write_all(line.as_bytes())
                .map_err(|e| ServiceError::io(path, e))?;
            file.flush().map_err(|e| ServiceError::io(path, e))?;
        }
        state.current.insert(entry.record.clone())?;
        state.appended += 1;
        Ok(entry)
    }

    pub fn snapshot(&self) -> AnnotationSet {
        self.state.read().expect("state lock").current.clone()
    }

    pub fn with_current<T>(&self, f: impl FnOnce(&AnnotationSet) -> T) -> T {
        f(&self.state.read().expect("state lock").current)
    }

    /// Number of log lines, including superseded ones.
    pub fn log_len(&self) -> usize {
        self.state.read().expect("state lock").appended
    }
}
