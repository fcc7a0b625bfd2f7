//! JSON-lines run log: one record per training batch and one per session.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::losses::LossReport;

#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord<'a> {
    Batch {
        session: usize,
        epoch: usize,
        batch: usize,
        losses: &'a LossReport,
    },
    Session {
        session: usize,
        classes_seen: usize,
        accuracy: f64,
        wall_time_s: f64,
    },
    Note {
        message: &'a str,
    },
}

/// Line-buffered sink; `RunLog::disabled()` swallows everything.
pub struct RunLog {
    sink: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            sink: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn disabled() -> Self {
        Self { sink: None }
    }

    pub fn record(&mut self, record: &LogRecord<'_>) {
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(record).expect("log records serialize");
            let _ = writeln!(sink, "{line}");
        }
    }

    pub fn flush(&mut self) {
        if let Some(sink) = &mut self.sink {
            let _ = sink.flush();
        }
    }
}

impl Drop for RunLog {
    fn drop(&mut self) {
        self.flush();
    }
}
