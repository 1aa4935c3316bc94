//! Append-only newline-delimited JSON response log.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rrpoll_core::protocol::ResponseRecord;

#[derive(Debug)]
pub struct ResponseLog {
    path: Option<PathBuf>,
    file: Option<File>,
    records: Vec<ResponseRecord>,
}

impl ResponseLog {
    /// Log kept only in memory.
    pub fn in_memory() -> Self {
        ResponseLog {
            path: None,
            file: None,
            records: Vec::new(),
        }
    }

    /// Opens (or creates) `path` and loads every complete line. A torn final
    /// line from an interrupted write is dropped and truncated away.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut records = Vec::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            let mut offset = 0u64;
            for line in reader.split(b'\n') {
                let line = line?;
                offset += line.len() as u64 + 1;
                if line.iter().all(u8::is_ascii_whitespace) {
                    valid_len = offset;
                    continue;
                }
                match serde_json::from_slice::<ResponseRecord>(&line) {
                    Ok(record) => {
                        records.push(record);
                        valid_len = offset;
                    }
                    Err(err) => {
                        tracing::warn!(target: "audit", path = %path.display(), %err, "dropping unreadable log tail");
                        break;
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if file.metadata()?.len() > valid_len {
            file.set_len(valid_len)?;
        }
        Ok(ResponseLog {
            path: Some(path),
            file: Some(file),
            records,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ResponseRecord] {
        &self.records
    }

    /// Writes and syncs the line before the record becomes visible.
    pub fn append(&mut self, record: ResponseRecord) -> io::Result<()> {
        if let Some(file) = &mut self.file {
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
            file.sync_data()?;
        }
        self.records.push(record);
        Ok(())
    }
}
