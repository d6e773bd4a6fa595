use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::clock::Clock;

/// One line of a service audit log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
    pub operation: String,
    /// `"ok"` or the error code of the failure.
    pub outcome: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jti: Option<String>,
}

impl AuditRecord {
    pub fn is_ok(&self) -> bool {
        self.outcome == "ok"
    }
}

struct Inner {
    records: Vec<AuditRecord>,
    last_timestamp: i64,
    sink: Option<BufWriter<File>>,
}

/// Append-only audit log. Timestamps never go backwards even if the clock
/// does; writes go through a single lock so the log has one writer.
pub struct AuditLog {
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

impl AuditLog {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        AuditLog {
            clock,
            inner: Mutex::new(Inner {
                records: Vec::new(),
                last_timestamp: i64::MIN,
                sink: None,
            }),
        }
    }

    /// Also mirror every record to `path` as JSON lines (appending).
    pub fn with_file(self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.inner.lock().expect("audit lock").sink = Some(BufWriter::new(file));
        Ok(self)
    }

    pub fn append(&self, client_id: Option<&str>, operation: &str, outcome: &str, jti: Option<&str>) {
        let now = self.clock.now();
        let mut inner = self.inner.lock().expect("audit lock");
        let timestamp = now.max(inner.last_timestamp);
        inner.last_timestamp = timestamp;
        let record = AuditRecord {
            seq: inner.records.len() as u64,
            timestamp,
            client_id: client_id.map(str::to_string),
            operation: operation.to_string(),
            outcome: outcome.to_string(),
            jti: jti.map(str::to_string),
        };
        if let Some(sink) = inner.sink.as_mut() {
            // A failing log file must not take the service down; the in-memory
            // copy stays authoritative.
            let _ = serde_json::to_writer(&mut *sink, &record)
                .map_err(std::io::Error::from)
                .and_then(|_| sink.write_all(b"\n"))
                .and_then(|_| sink.flush());
        }
        inner.records.push(record);
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.inner.lock().expect("audit lock").records.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("audit lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    #[test]
    fn timestamps_are_monotone_when_clock_goes_back() {
        let clock = Arc::new(ManualClock::new(100));
        let log = AuditLog::new(clock.clone());
        log.append(Some("c"), "op", "ok", None);
        clock.set(50);
        log.append(Some("c"), "op", "Fail", Some("j"));
        let records = log.records();
        assert_eq!(records[0].timestamp, 100);
        assert_eq!(records[1].timestamp, 100);
        assert_eq!(records[1].seq, 1);
        assert!(!records[1].is_ok());
    }

    #[test]
    fn mirrors_json_lines_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let log = AuditLog::new(Arc::new(ManualClock::new(7)))
            .with_file(&path)
            .unwrap();
        log.append(None, "a", "ok", None);
        log.append(Some("x"), "b", "ok", Some("j"));
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<AuditRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, log.records());
    }
}
