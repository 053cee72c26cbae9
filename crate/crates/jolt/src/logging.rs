//! Structured JSON-lines event log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{Map, Value};

use crate::error::{IoContext, Result};

/// Writes one JSON object per event: `seq` (monotonic), `t_ms` (wall time
/// since the logger was created), `stage`, then the event fields.
pub struct EventLog {
    out: Option<(PathBuf, BufWriter<File>)>,
    echo: bool,
    seq: u64,
    start: Instant,
}

impl EventLog {
    pub fn to_file(path: &Path, echo: bool) -> Result<Self> {
        let file = File::create(path).at(path)?;
        Ok(EventLog { out: Some((path.to_path_buf(), BufWriter::new(file))), echo, seq: 0, start: Instant::now() })
    }

    pub fn stderr() -> Self {
        EventLog { out: None, echo: true, seq: 0, start: Instant::now() }
    }

    pub fn event(&mut self, stage: &str, fields: Value) -> Result<()> {
        let mut obj = Map::new();
        obj.insert("seq".into(), self.seq.into());
        obj.insert("t_ms".into(), (self.start.elapsed().as_secs_f64() * 1e3).into());
        obj.insert("stage".into(), stage.into());
        if let Value::Object(m) = fields {
            obj.extend(m);
        }
        self.seq += 1;
        let line = Value::Object(obj).to_string();
        if let Some((path, w)) = self.out.as_mut() {
            writeln!(w, "{line}").at(path.as_path())?;
        }
        if self.echo {
            eprintln!("{line}");
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = self.out.as_mut() {
            w.flush().at(path.as_path())?;
        }
        Ok(())
    }
}

/// `(l_sl, l_ntp)` per training step, read back from a log file.
pub fn replay_losses(path: &Path) -> Result<Vec<(f64, f64)>> {
    let events: Vec<Value> = crate::formats::read_jsonl(path)?;
    Ok(events
        .iter()
        .filter(|e| e["stage"] == "train_step")
        .map(|e| (e["l_sl"].as_f64().unwrap_or(f64::NAN), e["l_ntp"].as_f64().unwrap_or(f64::NAN)))
        .collect())
}
