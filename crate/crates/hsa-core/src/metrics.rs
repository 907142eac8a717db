//! Append-only JSONL metrics: one self-contained record per line.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One structured metrics event. Scalars are keyed by name so loss terms,
/// learning rates, and accuracies share the format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub ts: u64,
    pub run: String,
    pub epoch: u64,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn new(run: &str, epoch: u64, step: u64) -> Self {
        MetricsRecord {
            ts: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            run: run.to_string(),
            epoch,
            step,
            metrics: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.to_string(), value);
        self
    }
}

/// Single-writer metrics sink; lines are flushed at epoch boundaries.
pub struct MetricsLogger {
    sink: Box<dyn Write + Send>,
    path: String,
}

impl MetricsLogger {
    pub fn to_file(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(MetricsLogger {
            sink: Box::new(std::io::BufWriter::new(file)),
            path: path.display().to_string(),
        })
    }

    /// Discard-everything logger for library callers that don't log.
    pub fn sink() -> Self {
        MetricsLogger {
            sink: Box::new(std::io::sink()),
            path: "<sink>".into(),
        }
    }

    pub fn log(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
        self.sink
            .write_all(line.as_bytes())
            .and_then(|_| self.sink.write_all(b"\n"))
            .map_err(|e| Error::io(self.path.clone(), e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.sink.flush().map_err(|e| Error::io(self.path.clone(), e))
    }
}

/// Parse a JSONL metrics file back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("metrics line: {e}"))))
        .collect()
}
