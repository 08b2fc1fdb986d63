//! `metrics.jsonl` writer. One JSON object per line, keys sorted, each
//! carrying `schema` and `kind`. Wall-clock times go to `timing.jsonl` so
//! the metrics file stays byte-identical across reruns.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use serde::Serialize;
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Starts a fresh file.
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    /// Writes `fields` (a struct or map) tagged with `kind`.
    pub fn record<T: Serialize>(&mut self, kind: &str, fields: &T) -> anyhow::Result<()> {
        let line = tagged(kind, fields)?;
        writeln!(self.out, "{}", serde_json::to_string(&line)?)?;
        self.out.flush()?;
        Ok(())
    }
}

/// `fields` as a JSON object with `schema` and `kind` added.
pub fn tagged<T: Serialize>(kind: &str, fields: &T) -> anyhow::Result<Value> {
    let mut map = match serde_json::to_value(fields)? {
        Value::Object(m) => m,
        Value::Null => Map::new(),
        other => anyhow::bail!("metrics record must be an object, got {other}"),
    };
    map.insert("schema".into(), SCHEMA_VERSION.into());
    map.insert("kind".into(), kind.into());
    Ok(Value::Object(map))
}

pub fn append_timing(dir: &Path, command: &str, elapsed: Duration) -> anyhow::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join(TIMING_FILE))?;
    let line = serde_json::json!({ "command": command, "wall_seconds": elapsed.as_secs_f64() });
    writeln!(f, "{line}")?;
    Ok(())
}
