//! Trace tables and metrics sidecars.
//!
//! A trace file is a comma-separated table with a schema comment line, a
//! header, one row per tick and a trailing `# records=N` line. A missing or
//! wrong trailer marks the file as truncated.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sim::{Metrics, TickRecord};

pub const TRACE_SCHEMA: u32 = 1;
pub const METRICS_SCHEMA: u32 = 1;

pub const COLUMNS: [&str; 14] = [
    "t",
    "r",
    "beta",
    "V",
    "delta",
    "tau",
    "delta_d",
    "tau_d",
    "delta_dot_cmd",
    "tau_dot_cmd",
    "eps",
    "h",
    "active",
    "solve_time",
];

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad trace format: {0}")]
    Format(String),
    #[error("truncated trace: {0}")]
    Truncated(String),
}

/// One row of the trace table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub r: f64,
    pub beta: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub delta: f64,
    pub tau: f64,
    pub delta_d: f64,
    pub tau_d: f64,
    pub delta_dot_cmd: f64,
    pub tau_dot_cmd: f64,
    pub eps: f64,
    pub h: f64,
    pub active: u8,
    pub solve_time: f64,
}

impl From<&TickRecord> for TraceRow {
    fn from(t: &TickRecord) -> Self {
        Self {
            t: t.t,
            r: t.state.r,
            beta: t.state.beta,
            v: t.state.v,
            delta: t.state.delta,
            tau: t.state.tau,
            delta_d: t.command.delta_d,
            tau_d: t.command.tau_d,
            delta_dot_cmd: t.decision.delta_dot_cmd,
            tau_dot_cmd: t.decision.tau_dot_cmd,
            eps: t.decision.eps,
            h: t.h,
            active: u8::from(t.decision.active),
            solve_time: t.decision.solve_time,
        }
    }
}

/// Streaming table writer; `finish` appends the record-count trailer.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
    records: usize,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W) -> Result<Self, TraceError> {
        writeln!(out, "# driftsafe trace schema={TRACE_SCHEMA}")?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(COLUMNS)?;
        Ok(Self { inner, records: 0 })
    }

    pub fn write(&mut self, row: &TraceRow) -> Result<(), TraceError> {
        self.inner.serialize(row)?;
        self.records += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TraceError> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn records(&self) -> usize {
        self.records
    }

    pub fn finish(self) -> Result<W, TraceError> {
        let records = self.records;
        let mut out = self
            .inner
            .into_inner()
            .map_err(|e| TraceError::Io(std::io::Error::other(e.to_string())))?;
        writeln!(out, "# records={records}")?;
        out.flush()?;
        Ok(out)
    }
}

pub fn write_rows<W: Write>(out: W, rows: impl IntoIterator<Item = TraceRow>) -> Result<W, TraceError> {
    let mut w = TraceWriter::new(out)?;
    for row in rows {
        w.write(&row)?;
    }
    w.finish()
}

pub fn write_trace(path: &Path, ticks: &[TickRecord]) -> Result<(), TraceError> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_rows(file, ticks.iter().map(TraceRow::from))?;
    Ok(())
}

pub fn trace_to_string(ticks: &[TickRecord]) -> String {
    let buf = write_rows(Vec::new(), ticks.iter().map(TraceRow::from)).expect("in-memory write");
    String::from_utf8(buf).expect("utf-8 table")
}

/// Parses a trace table, checking the schema line, header and trailer.
pub fn read_rows<R: BufRead>(input: R) -> Result<Vec<TraceRow>, TraceError> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .transpose()?
        .ok_or_else(|| TraceError::Format("empty file".into()))?;
    let expected = format!("# driftsafe trace schema={TRACE_SCHEMA}");
    if first.trim() != expected {
        return Err(TraceError::Format(format!("unexpected preamble `{first}`")));
    }
    let mut body = String::new();
    let mut trailer = None;
    for line in lines {
        let line = line?;
        if let Some(rest) = line.strip_prefix("# records=") {
            trailer = Some(rest.trim().to_string());
            continue;
        }
        if trailer.is_some() {
            return Err(TraceError::Format("data after trailer".into()));
        }
        body.push_str(&line);
        body.push('\n');
    }
    let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(TraceError::Format(format!("unexpected columns {header:?}")));
    }
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<TraceRow>, _>>()?;
    let Some(count) = trailer else {
        return Err(TraceError::Truncated(format!("no trailer after {} rows", rows.len())));
    };
    let count: usize = count
        .parse()
        .map_err(|_| TraceError::Format(format!("bad record count `{count}`")))?;
    if count != rows.len() {
        return Err(TraceError::Truncated(format!(
            "trailer says {count} rows, found {}",
            rows.len()
        )));
    }
    Ok(rows)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, TraceError> {
    read_rows(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Metrics file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema: u32,
    pub scenario: String,
    pub bypass: bool,
    pub params_hash: String,
    pub dt: f64,
    pub error: Option<String>,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl MetricsFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }

    pub fn from_json(text: &str) -> Result<Self, TraceError> {
        let m: Self = serde_json::from_str(text)?;
        if m.schema != METRICS_SCHEMA {
            return Err(TraceError::Format(format!("unsupported metrics schema {}", m.schema)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
