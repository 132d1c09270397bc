//! Append-only NDJSON event log.
//!
//! One record per line: `{"seq":N,"timestamp":MS,"kind":"...","payload":{...}}`.
//! Sequence numbers start at 1 and increase by one per record.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Event;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    #[serde(flatten)]
    pub event: Event,
}

impl EventRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event records always serialize")
    }
}

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("corrupt event log at seq {seq}: {reason}")]
    Corrupt { seq: u64, reason: String },
    #[error("event log i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Parses a whole log, checking line syntax and sequence continuity.
/// A failure names the sequence number expected at the offending line.
pub fn parse_log(text: &str) -> Result<Vec<EventRecord>, EventLogError> {
    let mut records = Vec::new();
    let mut expected = 1u64;
    for line in text.split('\n') {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord = serde_json::from_str(line).map_err(|e| EventLogError::Corrupt {
            seq: expected,
            reason: e.to_string(),
        })?;
        if record.seq != expected {
            return Err(EventLogError::Corrupt {
                seq: expected,
                reason: format!("found seq {} where {} was expected", record.seq, expected),
            });
        }
        expected += 1;
        records.push(record);
    }
    Ok(records)
}

/// Reads a log file; a missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Vec<EventRecord>, EventLogError> {
    match std::fs::read_to_string(path) {
        Ok(text) => parse_log(&text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(source) => Err(EventLogError::Io {
            path: path.to_owned(),
            source,
        }),
    }
}

pub fn to_ndjson(records: &[EventRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

/// Appends records to a log file, flushing after every record.
pub struct EventLogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl EventLogWriter {
    pub fn open(path: &Path) -> Result<Self, EventLogError> {
        let io = |source| EventLogError::Io {
            path: path.to_owned(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self {
            path: path.to_owned(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, record: &EventRecord) -> Result<(), EventLogError> {
        let io = |source| EventLogError::Io {
            path: self.path.clone(),
            source,
        };
        writeln!(self.out, "{}", record.to_line()).map_err(io)?;
        self.out.flush().map_err(io)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), EventLogError> {
        self.out.flush().map_err(|source| EventLogError::Io {
            path: self.path.clone(),
            source,
        })?;
        self.out.get_ref().sync_data().map_err(|source| EventLogError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Deterministic clock advancing by a fixed step on every reading.
pub struct ManualClock {
    now: AtomicU64,
    step: u64,
}

impl ManualClock {
    pub fn new(start_ms: u64, step_ms: u64) -> Self {
        Self {
            now: AtomicU64::new(start_ms),
            step: step_ms,
        }
    }

    pub fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.fetch_add(self.step, Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Event;

    fn record(seq: u64) -> EventRecord {
        EventRecord {
            seq,
            timestamp: 1000 + seq,
            event: Event::WorkerRevoked {
                worker_id: format!("w{seq}"),
                reason: "manual".into(),
            },
        }
    }

    #[test]
    fn line_format_has_documented_fields() {
        let v: serde_json::Value = serde_json::from_str(&record(1).to_line()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 4);
        for k in ["seq", "timestamp", "kind", "payload"] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(v["kind"], "worker_revoked");
    }

    #[test]
    fn parses_round_trip() {
        let records: Vec<_> = (1..=3).map(record).collect();
        assert_eq!(parse_log(&to_ndjson(&records)).unwrap(), records);
        assert!(parse_log("").unwrap().is_empty());
    }

    #[test]
    fn truncated_tail_names_seq() {
        let mut text = to_ndjson(&[record(1), record(2)]);
        let third = record(3).to_line();
        text.push_str(&third[..third.len() / 2]);
        match parse_log(&text) {
            Err(EventLogError::Corrupt { seq, .. }) => assert_eq!(seq, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sequence_gap_is_corrupt() {
        let text = to_ndjson(&[record(1), record(3)]);
        assert!(matches!(parse_log(&text), Err(EventLogError::Corrupt { seq: 2, .. })));
    }

    #[test]
    fn writer_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log/events.ndjson");
        {
            let mut w = EventLogWriter::open(&path).unwrap();
            w.append(&record(1)).unwrap();
        }
        let mut w = EventLogWriter::open(&path).unwrap();
        w.append(&record(2)).unwrap();
        w.flush().unwrap();
        assert_eq!(read_log(&path).unwrap().len(), 2);
        assert!(read_log(&dir.path().join("missing")).unwrap().is_empty());
    }
}
