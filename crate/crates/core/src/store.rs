//! Disk-backed blob store, result topics, telemetry table and version repository.
//!
//! Layout under the fabric state root:
//!
//! ```text
//! blobs/<container>/<name>          blob bytes
//! blobs/<container>/.<name>.sha256  recorded digest
//! topics/<client>.jsonl             one ResultRecord per line
//! telemetry.jsonl                   one TelemetryRecord per line
//! versions/<id>.zip, <id>.json      tool packages and their metadata
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Cursor, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::journal::{Journal, JournalError};
use crate::model::{is_safe_name, BlobRef, ResultRecord, TaskId, TelemetryRecord, Timestamp, ToolVersionId};
use crate::stats::Summary;

/// Entry point every version package must carry at its root.
pub const ENTRY_POINT: &str = "run-analysis";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("hash mismatch for {what}: expected {expected}, stored bytes hash to {actual}")]
    HashMismatch {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("malformed archive: {0}")]
    MalformedArchive(String),
    #[error("topic {topic:?} does not match result client {client}")]
    TopicMismatch { topic: String, client: String },
    #[error("storage failure: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_name(s: &str) -> Result<(), StoreError> {
    if is_safe_name(s) && !s.starts_with('.') {
        Ok(())
    } else {
        Err(StoreError::InvalidName(s.to_owned()))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().expect("blob paths have parents");
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn read_optional(path: &Path) -> io::Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug)]
pub struct BlobStore {
    dir: PathBuf,
}

impl BlobStore {
    pub fn open(dir: PathBuf) -> Result<Self, StoreError> {
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn paths(&self, container: &str, name: &str) -> (PathBuf, PathBuf) {
        let c = self.dir.join(container);
        (c.join(name), c.join(format!(".{name}.sha256")))
    }

    pub fn put(&self, container: &str, name: &str, bytes: &[u8]) -> Result<BlobRef, StoreError> {
        check_name(container)?;
        check_name(name)?;
        let content_hash = sha256_hex(bytes);
        let (data, digest) = self.paths(container, name);
        write_atomic(&data, bytes)?;
        write_atomic(&digest, content_hash.as_bytes())?;
        Ok(BlobRef {
            container: container.to_owned(),
            name: name.to_owned(),
            content_hash,
        })
    }

    /// Reads the blob and verifies it against the digest carried by `blob`.
    pub fn get(&self, blob: &BlobRef) -> Result<Vec<u8>, StoreError> {
        let (bytes, _) = self.read(&blob.container, &blob.name)?;
        verify(&blob.container, &blob.name, &bytes, &blob.content_hash)?;
        Ok(bytes)
    }

    /// Reads the blob and verifies it against the digest recorded at upload time.
    pub fn get_by_name(&self, container: &str, name: &str) -> Result<(Vec<u8>, BlobRef), StoreError> {
        let (bytes, recorded) = self.read(container, name)?;
        verify(container, name, &bytes, &recorded)?;
        Ok((
            bytes,
            BlobRef {
                container: container.to_owned(),
                name: name.to_owned(),
                content_hash: recorded,
            },
        ))
    }

    fn read(&self, container: &str, name: &str) -> Result<(Vec<u8>, String), StoreError> {
        check_name(container)?;
        check_name(name)?;
        let what = || format!("blob {container}/{name}");
        let (data, digest) = self.paths(container, name);
        let bytes = read_optional(&data)?.ok_or_else(|| StoreError::NotFound(what()))?;
        let recorded = read_optional(&digest)?.ok_or_else(|| StoreError::NotFound(what()))?;
        Ok((bytes, String::from_utf8_lossy(&recorded).trim().to_owned()))
    }

    pub fn count(&self) -> usize {
        fs::read_dir(&self.dir)
            .into_iter()
            .flatten()
            .flatten()
            .flat_map(|c| fs::read_dir(c.path()).into_iter().flatten().flatten())
            .filter(|f| !f.file_name().to_string_lossy().starts_with('.'))
            .count()
    }
}

fn verify(container: &str, name: &str, bytes: &[u8], expected: &str) -> Result<(), StoreError> {
    let actual = sha256_hex(bytes);
    if actual == expected {
        Ok(())
    } else {
        Err(StoreError::HashMismatch {
            what: format!("blob {container}/{name}"),
            expected: expected.to_owned(),
            actual,
        })
    }
}

/// Append-only per-client result channels, read by cursor.
#[derive(Debug)]
pub struct TopicStore {
    dir: PathBuf,
    topics: HashMap<String, (Vec<ResultRecord>, Journal)>,
}

impl TopicStore {
    pub fn open(dir: PathBuf) -> Result<Self, StoreError> {
        fs::create_dir_all(&dir)?;
        let mut topics = HashMap::new();
        for file in fs::read_dir(&dir)? {
            let path = file?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
                continue;
            };
            let records = Journal::replay(&path)?;
            topics.insert(name, (records, Journal::open_append(&path)?));
        }
        Ok(Self { dir, topics })
    }

    /// Appends `record`; the topic must be the rendering of the record's client id.
    pub fn publish(&mut self, topic: &str, record: &ResultRecord) -> Result<u64, StoreError> {
        check_name(topic)?;
        if record.client.to_string() != topic {
            return Err(StoreError::TopicMismatch {
                topic: topic.to_owned(),
                client: record.client.to_string(),
            });
        }
        if !self.topics.contains_key(topic) {
            let journal = Journal::open_append(&self.dir.join(format!("{topic}.jsonl")))?;
            self.topics.insert(topic.to_owned(), (Vec::new(), journal));
        }
        let (records, journal) = self.topics.get_mut(topic).expect("just inserted");
        journal.append(record)?;
        records.push(record.clone());
        Ok(records.len() as u64)
    }

    /// Messages at positions ≥ `cursor`, plus the cursor to resume from.
    pub fn poll(&self, topic: &str, cursor: u64) -> (Vec<ResultRecord>, u64) {
        match self.topics.get(topic) {
            None => (Vec::new(), 0),
            Some((records, _)) => {
                let start = (cursor as usize).min(records.len());
                (records[start..].to_vec(), records.len() as u64)
            }
        }
    }

    /// Drops a topic after the client has acknowledged its results.
    pub fn close(&mut self, topic: &str) -> Result<bool, StoreError> {
        check_name(topic)?;
        match self.topics.remove(topic) {
            None => Ok(false),
            Some(_) => {
                fs::remove_file(self.dir.join(format!("{topic}.jsonl")))?;
                Ok(true)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TelemetryStats {
    pub count: usize,
    pub queue_wait: Summary,
    pub processing_time: Summary,
}

impl TelemetryStats {
    pub fn of(records: &[TelemetryRecord]) -> Self {
        let waits: Vec<f64> = records.iter().map(|r| r.queue_wait).collect();
        let times: Vec<f64> = records.iter().map(|r| r.processing_time).collect();
        Self {
            count: records.len(),
            queue_wait: Summary::of(&waits),
            processing_time: Summary::of(&times),
        }
    }
}

#[derive(Debug)]
pub struct TelemetryStore {
    records: Vec<TelemetryRecord>,
    journal: Journal,
}

impl TelemetryStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Ok(Self {
            records: Journal::replay(path)?,
            journal: Journal::open_append(path)?,
        })
    }

    pub fn record(&mut self, rec: &TelemetryRecord) -> Result<(), StoreError> {
        self.journal.append(rec)?;
        self.records.push(rec.clone());
        Ok(())
    }

    pub fn query(&self, task: TaskId) -> Vec<TelemetryRecord> {
        self.records.iter().filter(|r| r.task == task).cloned().collect()
    }

    pub fn stats(&self) -> TelemetryStats {
        TelemetryStats::of(&self.records)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionPackage {
    pub id: ToolVersionId,
    pub archive: BlobRef,
    pub uploaded_at: Timestamp,
}

/// Checks that `bytes` is a readable zip with the entry point at its root.
pub fn validate_package(bytes: &[u8]) -> Result<(), StoreError> {
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes))
        .map_err(|e| StoreError::MalformedArchive(e.to_string()))?;
    for i in 0..archive.len() {
        let mut file = archive
            .by_index(i)
            .map_err(|e| StoreError::MalformedArchive(e.to_string()))?;
        if file.enclosed_name().is_none() {
            return Err(StoreError::MalformedArchive(format!(
                "entry {:?} escapes the archive root",
                file.name()
            )));
        }
        io::copy(&mut file.by_ref().take(u64::MAX), &mut io::sink())
            .map_err(|e| StoreError::MalformedArchive(e.to_string()))?;
    }
    if archive.index_for_name(ENTRY_POINT).is_none() {
        return Err(StoreError::MalformedArchive(format!(
            "missing {ENTRY_POINT} at the archive root"
        )));
    }
    Ok(())
}

#[derive(Debug)]
pub struct VersionRepo {
    dir: PathBuf,
    packages: BTreeMap<ToolVersionId, VersionPackage>,
}

impl VersionRepo {
    pub fn open(dir: PathBuf) -> Result<Self, StoreError> {
        fs::create_dir_all(&dir)?;
        let mut packages = BTreeMap::new();
        for file in fs::read_dir(&dir)? {
            let path = file?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("json") {
                let pkg: VersionPackage = serde_json::from_slice(&fs::read(&path)?)
                    .map_err(|e| StoreError::Io(io::Error::new(io::ErrorKind::InvalidData, e)))?;
                packages.insert(pkg.id.clone(), pkg);
            }
        }
        Ok(Self { dir, packages })
    }

    /// Stores a package, replacing any previous one with the same id.
    pub fn upload(
        &mut self,
        id: &ToolVersionId,
        bytes: &[u8],
        now: Timestamp,
    ) -> Result<VersionPackage, StoreError> {
        if !id.is_valid() || id.as_str().starts_with('.') {
            return Err(StoreError::InvalidName(id.to_string()));
        }
        validate_package(bytes)?;
        let file_name = format!("{id}.zip");
        write_atomic(&self.dir.join(&file_name), bytes)?;
        let pkg = VersionPackage {
            id: id.clone(),
            archive: BlobRef {
                container: "versions".into(),
                name: file_name,
                content_hash: sha256_hex(bytes),
            },
            uploaded_at: now,
        };
        write_atomic(
            &self.dir.join(format!("{id}.json")),
            &serde_json::to_vec_pretty(&pkg).expect("package metadata serializes"),
        )?;
        self.packages.insert(id.clone(), pkg.clone());
        Ok(pkg)
    }

    pub fn get(&self, id: &ToolVersionId) -> Result<(VersionPackage, Vec<u8>), StoreError> {
        let pkg = self
            .packages
            .get(id)
            .ok_or_else(|| StoreError::NotFound(format!("version {id}")))?;
        let bytes = read_optional(&self.dir.join(&pkg.archive.name))?
            .ok_or_else(|| StoreError::NotFound(format!("version {id}")))?;
        verify("versions", &pkg.archive.name, &bytes, &pkg.archive.content_hash)?;
        Ok((pkg.clone(), bytes))
    }

    pub fn list(&self) -> Vec<VersionPackage> {
        self.packages.values().cloned().collect()
    }
}

/// Builds a zip archive from `(path, contents, executable)` triples.
pub fn build_zip<'a>(files: impl IntoIterator<Item = (&'a str, &'a [u8], bool)>) -> Vec<u8> {
    use std::io::Write;
    let mut out = zip::ZipWriter::new(Cursor::new(Vec::new()));
    for (name, contents, executable) in files {
        // Deflate state setup costs more than it saves on small entries.
        let method = if contents.len() > 4096 {
            zip::CompressionMethod::Deflated
        } else {
            zip::CompressionMethod::Stored
        };
        let opts = zip::write::SimpleFileOptions::default()
            .compression_method(method)
            .unix_permissions(if executable { 0o755 } else { 0o644 });
        out.start_file(name, opts).expect("zip entry");
        out.write_all(contents).expect("in-memory write");
    }
    out.finish().expect("in-memory zip").into_inner()
}

/// Unpacks a zip archive into `dir`, preserving executable bits.
pub fn extract_zip(bytes: &[u8], dir: &Path) -> Result<(), StoreError> {
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes))
        .map_err(|e| StoreError::MalformedArchive(e.to_string()))?;
    archive
        .extract(dir)
        .map_err(|e| StoreError::MalformedArchive(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClientId, Outcome, OutcomeKind};

    fn record(client: ClientId) -> ResultRecord {
        ResultRecord {
            task: TaskId::new(),
            client,
            outcome: Outcome::new(OutcomeKind::Pass),
            worker: "w".into(),
            queue_wait: 1.0,
            processing_time: 2.0,
            dequeue_count: 1,
            completed_at: 5,
        }
    }

    #[test]
    fn blob_round_trip_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path().join("blobs")).unwrap();
        let empty = store.put("c", "empty", b"").unwrap();
        assert_eq!(
            empty.content_hash,
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(store.get(&empty).unwrap(), b"");

        let first = store.put("c", "n", b"one").unwrap();
        assert_eq!(store.get(&first).unwrap(), b"one");
        let second = store.put("c", "n", b"two").unwrap();
        assert_ne!(first.content_hash, second.content_hash);
        assert_eq!(store.get_by_name("c", "n").unwrap().0, b"two");
        // The old reference no longer verifies.
        assert!(matches!(store.get(&first), Err(StoreError::HashMismatch { .. })));
        assert_eq!(store.count(), 2);
    }

    #[test]
    fn blob_errors() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path().join("blobs")).unwrap();
        let missing = BlobRef {
            container: "c".into(),
            name: "nope".into(),
            content_hash: sha256_hex(b""),
        };
        assert!(matches!(store.get(&missing), Err(StoreError::NotFound(_))));
        assert!(matches!(store.put("", "n", b""), Err(StoreError::InvalidName(_))));
        assert!(matches!(store.put("c", "../x", b""), Err(StoreError::InvalidName(_))));
        assert!(matches!(store.put("c", ".hidden", b""), Err(StoreError::InvalidName(_))));
    }

    #[test]
    fn tampered_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path().join("blobs")).unwrap();
        let r = store.put("c", "payload", b"hello world").unwrap();
        let path = dir.path().join("blobs/c/payload");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert_ne!(sha256_hex(&bytes), r.content_hash);
        assert!(matches!(store.get(&r), Err(StoreError::HashMismatch { .. })));
        assert!(matches!(
            store.get_by_name("c", "payload"),
            Err(StoreError::HashMismatch { .. })
        ));
    }

    #[test]
    fn topics_append_and_poll() {
        let dir = tempfile::tempdir().unwrap();
        let mut topics = TopicStore::open(dir.path().to_owned()).unwrap();
        let client = ClientId::new();
        let name = client.to_string();
        assert_eq!(topics.poll(&name, 0), (vec![], 0));

        let rec = record(client);
        assert_eq!(topics.publish(&name, &rec).unwrap(), 1);
        assert_eq!(topics.publish(&name, &rec).unwrap(), 2);
        topics.publish(&name, &record(client)).unwrap();
        let (msgs, next) = topics.poll(&name, 1);
        assert_eq!((msgs.len(), next), (2, 3));
        assert_eq!(topics.poll(&name, 1), (msgs, 3));
        assert_eq!(topics.poll(&name, 0).0[0], rec);

        let other = ClientId::new().to_string();
        assert!(matches!(
            topics.publish(&other, &rec),
            Err(StoreError::TopicMismatch { .. })
        ));

        drop(topics);
        let mut reopened = TopicStore::open(dir.path().to_owned()).unwrap();
        assert_eq!(reopened.poll(&name, 0).1, 3);
        assert!(reopened.close(&name).unwrap());
        assert_eq!(reopened.poll(&name, 0).1, 0);
    }

    #[test]
    fn telemetry_query_and_stats() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = TelemetryStore::open(&dir.path().join("telemetry.jsonl")).unwrap();
        assert_eq!(t.stats().count, 0);
        assert_eq!(t.stats().queue_wait, Summary::default());
        let id = TaskId::new();
        for (i, wait) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            t.record(&TelemetryRecord {
                task: if i == 0 { id } else { TaskId::new() },
                queue_wait: wait,
                processing_time: 10.0,
                dequeue_count: 1,
                visibility_transitions: 0,
                worker: "w".into(),
            })
            .unwrap();
        }
        assert_eq!(t.query(id).len(), 1);
        let s = t.stats();
        assert_eq!((s.count, s.queue_wait.mean, s.queue_wait.max), (3, 2.0, 3.0));
    }

    #[test]
    fn version_repo() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = VersionRepo::open(dir.path().to_owned()).unwrap();
        let zip_a = build_zip([(ENTRY_POINT, &b"#!/bin/sh\necho a\n"[..], true)]);
        let zip_b = build_zip([
            (ENTRY_POINT, &b"#!/bin/sh\necho b\n"[..], true),
            ("lib/rules.txt", &b"x"[..], false),
        ]);
        let id = ToolVersionId::new("sdv-2.1");
        repo.upload(&id, &zip_a, 1).unwrap();
        assert_eq!(repo.list().len(), 1);
        repo.upload(&id, &zip_b, 2).unwrap();
        let (pkg, bytes) = repo.get(&id).unwrap();
        assert_eq!((pkg.uploaded_at, bytes), (2, zip_b));
        assert!(matches!(
            repo.get(&"missing".into()),
            Err(StoreError::NotFound(_))
        ));
        assert!(matches!(
            repo.upload(&"bad".into(), b"not a zip", 3),
            Err(StoreError::MalformedArchive(_))
        ));
        let no_entry = build_zip([("README", &b"x"[..], false)]);
        assert!(matches!(
            repo.upload(&"bad".into(), &no_entry, 3),
            Err(StoreError::MalformedArchive(_))
        ));
        drop(repo);
        assert_eq!(VersionRepo::open(dir.path().to_owned()).unwrap().list().len(), 1);
    }

    #[test]
    fn zip_extract_keeps_exec_bit() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let bytes = build_zip([(ENTRY_POINT, &b"#!/bin/sh\n"[..], true), ("d/f", &b"x"[..], false)]);
        extract_zip(&bytes, dir.path()).unwrap();
        let mode = fs::metadata(dir.path().join(ENTRY_POINT)).unwrap().permissions().mode();
        assert_ne!(mode & 0o111, 0);
        assert_eq!(fs::read(dir.path().join("d/f")).unwrap(), b"x");
    }
}
