//! Line-delimited JSON metrics: one self-describing object per line with
//! `kind`, `run_id` and `timestamp` next to the payload fields.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use serde::Serialize;
use serde_json::{Map, Value};

pub const KINDS: [&str; 3] = ["round", "attack", "summary"];

/// Appends records to a file, flushing after each one so a crash leaves
/// every completed record on disk.
pub struct RecordWriter {
    file: File,
    run_id: String,
}

impl RecordWriter {
    pub fn create(path: &Path, run_id: &str) -> anyhow::Result<Self> {
        let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(Self {
            file,
            run_id: run_id.to_string(),
        })
    }

    pub fn write<T: Serialize>(&mut self, kind: &str, payload: &T) -> anyhow::Result<()> {
        debug_assert!(KINDS.contains(&kind));
        let mut obj = Map::new();
        obj.insert("kind".into(), kind.into());
        obj.insert("run_id".into(), self.run_id.clone().into());
        obj.insert("timestamp".into(), now().into());
        match serde_json::to_value(payload)? {
            Value::Object(fields) => obj.extend(fields),
            other => {
                obj.insert("value".into(), other);
            }
        }
        let mut line = serde_json::to_string(&Value::Object(obj))?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Seconds since the Unix epoch.
fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ValidationSummary {
    pub records: usize,
    pub rounds: usize,
    pub attacks: usize,
    pub summaries: usize,
}

/// Checks every line of a metrics file. Round indices must strictly
/// increase within each run.
pub fn validate_file(path: &Path) -> anyhow::Result<ValidationSummary> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    validate(BufReader::new(file)).with_context(|| format!("invalid metrics file {}", path.display()))
}

pub fn validate<R: BufRead>(reader: R) -> anyhow::Result<ValidationSummary> {
    let mut out = ValidationSummary::default();
    let mut last_round: HashMap<String, u64> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| anyhow!("line {lineno}: {e}"))?;
        let obj = value
            .as_object()
            .ok_or_else(|| anyhow!("line {lineno}: not a JSON object"))?;
        let kind = obj
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| anyhow!("line {lineno}: missing `kind`"))?;
        let run_id = obj
            .get("run_id")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| anyhow!("line {lineno}: missing `run_id`"))?;
        if !obj.get("timestamp").is_some_and(Value::is_number) {
            bail!("line {lineno}: missing numeric `timestamp`");
        }
        match kind {
            "round" => {
                let round = obj
                    .get("round")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| anyhow!("line {lineno}: round record without integer `round`"))?;
                if let Some(&prev) = last_round.get(run_id) {
                    if round <= prev {
                        bail!("line {lineno}: round {round} does not follow round {prev}");
                    }
                }
                last_round.insert(run_id.to_string(), round);
                out.rounds += 1;
            }
            "attack" => out.attacks += 1,
            "summary" => out.summaries += 1,
            other => bail!("line {lineno}: unknown kind `{other}`"),
        }
        out.records += 1;
    }
    Ok(out)
}
