//! Optional JSONL event stream for long runs.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use anyhow::Context;
use serde_json::{json, Value};

pub struct EventLog {
    sink: Option<Mutex<BufWriter<File>>>,
}

impl EventLog {
    pub fn open(path: Option<&Path>) -> anyhow::Result<Self> {
        let sink = match path {
            None => None,
            Some(p) => {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .with_context(|| format!("opening event log {}", p.display()))?;
                Some(Mutex::new(BufWriter::new(file)))
            }
        };
        Ok(EventLog { sink })
    }

    /// Writes `{"time", "event", ...fields}` as one line.
    pub fn emit(&self, event: &str, fields: Value) {
        let Some(sink) = &self.sink else { return };
        let mut record = json!({
            "time": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            "event": event,
        });
        if let (Some(obj), Value::Object(extra)) = (record.as_object_mut(), fields) {
            obj.extend(extra);
        }
        let mut w = sink.lock().expect("event log lock");
        if writeln!(w, "{record}").and_then(|_| w.flush()).is_err() {
            log::warn!("could not write to the event log");
        }
    }
}
