//! Append-only JSON-lines files.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("journal {path} line {line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// A JSON-lines file that is only ever appended to or atomically rewritten.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
    appended: u64,
}

impl Journal {
    /// Reads every record. A torn final line (crash mid-write) is ignored; corruption anywhere
    /// else is an error.
    pub fn replay<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JournalError> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => {
                return Err(JournalError::Io {
                    path: path.to_owned(),
                    source,
                })
            }
        };
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|source| JournalError::Io {
                path: path.to_owned(),
                source,
            })?;
        let last = lines.len();
        let mut records = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(r) => records.push(r),
                Err(_) if i + 1 == last => {
                    log::warn!("{}: dropping torn final record", path.display());
                }
                Err(source) => {
                    return Err(JournalError::Corrupt {
                        path: path.to_owned(),
                        line: i + 1,
                        source,
                    })
                }
            }
        }
        Ok(records)
    }

    pub fn open_append(path: &Path) -> Result<Self, JournalError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| JournalError::Io {
                path: path.to_owned(),
                source,
            })?;
        Ok(Self {
            path: path.to_owned(),
            file,
            appended: 0,
        })
    }

    /// Atomically replaces `path` with `records` and opens it for appending.
    pub fn create_compacted<T: Serialize>(
        path: &Path,
        records: impl IntoIterator<Item = T>,
    ) -> Result<Self, JournalError> {
        write_atomically(path, records)?;
        Self::open_append(path)
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), JournalError> {
        let mut line = serde_json::to_vec(record).expect("journal records serialize");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .map_err(|source| JournalError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.appended += 1;
        Ok(())
    }

    /// Records appended since the file was last (re)written.
    pub fn appended(&self) -> u64 {
        self.appended
    }

    pub fn rewrite<T: Serialize>(
        &mut self,
        records: impl IntoIterator<Item = T>,
    ) -> Result<(), JournalError> {
        *self = Self::create_compacted(&self.path, records)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), JournalError> {
        self.file.sync_data().map_err(|source| JournalError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

fn write_atomically<T: Serialize>(
    path: &Path,
    records: impl IntoIterator<Item = T>,
) -> Result<(), JournalError> {
    let io_err = |source| JournalError::Io {
        path: path.to_owned(),
        source,
    };
    let tmp = path.with_extension("compacting");
    {
        let mut out = io::BufWriter::new(File::create(&tmp).map_err(io_err)?);
        for record in records {
            serde_json::to_writer(&mut out, &record).expect("journal records serialize");
            out.write_all(b"\n").map_err(io_err)?;
        }
        out.into_inner()
            .map_err(|e| io_err(e.into_error()))?
            .sync_all()
            .map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}
