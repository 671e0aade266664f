//! Session logs.
//!
//! A session directory holds one trace table per segment (a segment ends at
//! every reset) in the simulator's trace format, and `messages.jsonl` with
//! every broadcast message exactly as sent, one per line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use driftsafe_core::sim::TickRecord;
use driftsafe_core::trace::{TraceRow, TraceWriter};

use crate::protocol::Outbound;

pub const MESSAGES_FILE: &str = "messages.jsonl";

pub fn segment_file(index: usize) -> String {
    format!("segment-{index:03}.trace.csv")
}

pub struct SessionLog {
    dir: PathBuf,
    segment: Option<TraceWriter<BufWriter<File>>>,
    next_segment: usize,
    messages: BufWriter<File>,
    error: Option<io::Error>,
}

impl SessionLog {
    pub fn create(dir: &Path) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let messages = BufWriter::new(File::create(dir.join(MESSAGES_FILE))?);
        Ok(Self { dir: dir.to_path_buf(), segment: None, next_segment: 0, messages, error: None })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn keep(&mut self, r: Result<(), impl Into<io::Error>>) {
        if let Err(e) = r {
            let e = e.into();
            log::warn!("session log {}: {e}", self.dir.display());
            self.error.get_or_insert(e);
        }
    }

    pub fn record(&mut self, record: &TickRecord) {
        if self.segment.is_none() {
            let opened = File::create(self.dir.join(segment_file(self.next_segment)))
                .map_err(Into::into)
                .and_then(|f| TraceWriter::new(BufWriter::new(f)));
            self.next_segment += 1;
            match opened {
                Ok(w) => self.segment = Some(w),
                Err(e) => return self.keep(Err(to_io(e))),
            }
        }
        let row = TraceRow::from(record);
        let written = self.segment.as_mut().map_or(Ok(()), |w| w.write(&row).map_err(to_io));
        self.keep(written);
    }

    /// Closes the current trace segment; the next record opens a new one.
    pub fn new_segment(&mut self) {
        if let Some(w) = self.segment.take() {
            let done = w.finish().map(drop).map_err(to_io);
            self.keep(done);
        }
    }

    pub fn message(&mut self, encoded: &[u8]) {
        let written = self.messages.write_all(encoded).and_then(|_| self.messages.write_all(b"\n"));
        self.keep(written);
    }

    pub fn flush(&mut self) {
        let flushed = self.messages.flush();
        self.keep(flushed);
        if let Some(w) = &mut self.segment {
            let flushed = w.flush().map_err(to_io);
            self.keep(flushed);
        }
    }

    /// Finishes the open segment and flushes everything. Reports the first
    /// error seen during the session.
    pub fn finish(mut self) -> io::Result<()> {
        self.new_segment();
        self.flush();
        match self.error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

fn to_io(e: driftsafe_core::trace::TraceError) -> io::Error {
    match e {
        driftsafe_core::trace::TraceError::Io(e) => e,
        other => io::Error::other(other.to_string()),
    }
}

/// Reads back the broadcast log: raw line bytes and the parsed message.
pub fn read_messages(path: &Path) -> io::Result<Vec<(Vec<u8>, Outbound)>> {
    let reader = BufReader::new(File::open(path)?);
    reader
        .split(b'\n')
        .map(|line| {
            let line = line?;
            let msg = Outbound::decode(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            Ok((line, msg))
        })
        .collect()
}

/// Trace segments in order.
pub fn segment_paths(dir: &Path) -> Vec<PathBuf> {
    (0..)
        .map(|k| dir.join(segment_file(k)))
        .take_while(|p| p.exists())
        .collect()
}
