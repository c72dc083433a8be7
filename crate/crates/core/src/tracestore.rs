//! Content-hashed JSON documents on disk.
//!
//! Every persisted artifact (traces, cassettes, reports, manifests, scripts)
//! is wrapped in a [`StoredDocument`] whose hash covers its kind and the
//! canonical payload bytes. Keys are sorted and floats render in shortest
//! round-trip form, so the file is a pure function of the payload and any
//! edit to it is detected on read.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const STORE_SCHEMA_VERSION: &str = "icot-store/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentKind {
    Trace,
    Cassette,
    Report,
    Manifest,
    Script,
    Config,
}

impl DocumentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DocumentKind::Trace => "trace",
            DocumentKind::Cassette => "cassette",
            DocumentKind::Report => "report",
            DocumentKind::Manifest => "manifest",
            DocumentKind::Script => "script",
            DocumentKind::Config => "config",
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    IoError {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a stored document: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{path}: unknown schema version {found:?} (expected {STORE_SCHEMA_VERSION:?})")]
    UnknownSchemaVersion { path: PathBuf, found: String },
    #[error("{path}: content hash mismatch (recorded {recorded}, computed {computed})")]
    HashMismatch {
        path: PathBuf,
        recorded: String,
        computed: String,
    },
    #[error("{path}: file bytes differ from the canonical rendering of its content")]
    NonCanonical { path: PathBuf },
    #[error("payload cannot be serialized: {0}")]
    Serialize(String),
    #[error("payload does not decode as the requested type: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredDocument {
    pub schema_version: String,
    pub kind: DocumentKind,
    pub content_hash: String,
    pub payload: Value,
}

fn content_hash(kind: DocumentKind, payload: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(kind.as_str().as_bytes());
    hasher.update(b"\n");
    hasher.update(serde_json::to_vec(payload).unwrap_or_default());
    hex::encode(hasher.finalize())
}

impl StoredDocument {
    pub fn new<T: Serialize>(kind: DocumentKind, payload: &T) -> Result<Self, StoreError> {
        let payload = serde_json::to_value(payload).map_err(|e| StoreError::Serialize(e.to_string()))?;
        Ok(Self {
            schema_version: STORE_SCHEMA_VERSION.to_string(),
            kind,
            content_hash: content_hash(kind, &payload),
            payload,
        })
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, StoreError> {
        serde_json::from_value(self.payload.clone()).map_err(|e| StoreError::Decode(e.to_string()))
    }

    /// The exact bytes written to disk.
    pub fn render(&self) -> Vec<u8> {
        // Round-tripping through Value sorts every object's keys.
        let value = serde_json::to_value(self).unwrap_or(Value::Null);
        let mut bytes = serde_json::to_vec_pretty(&value).unwrap_or_default();
        bytes.push(b'\n');
        bytes
    }

    /// `<kind>-<first 12 hash hex digits>.json`
    pub fn file_name(&self) -> String {
        format!("{}-{}.json", self.kind.as_str(), &self.content_hash[..12])
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::IoError {
        path: path.to_path_buf(),
        source,
    }
}

/// Atomically writes `doc` to `path` (temp file in the same directory, then
/// rename), creating parent directories as needed.
pub fn write_document_to(path: &Path, doc: &StoredDocument) -> Result<(), StoreError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_error(dir))?;
    tmp.write_all(&doc.render()).map_err(io_error(path))?;
    tmp.as_file().sync_all().map_err(io_error(path))?;
    tmp.persist(path).map_err(|e| StoreError::IoError {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Wraps `payload` and writes it into `dir` under its content-derived name.
pub fn write_document<T: Serialize>(dir: &Path, kind: DocumentKind, payload: &T) -> Result<PathBuf, StoreError> {
    let doc = StoredDocument::new(kind, payload)?;
    let path = dir.join(doc.file_name());
    write_document_to(&path, &doc)?;
    Ok(path)
}

/// Reads and verifies a stored document.
pub fn read_document(path: &Path) -> Result<StoredDocument, StoreError> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    let raw: Value = serde_json::from_slice(&bytes).map_err(|e| StoreError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if let Some(found) = raw.get("schema_version").and_then(Value::as_str) {
        if found != STORE_SCHEMA_VERSION {
            return Err(StoreError::UnknownSchemaVersion {
                path: path.to_path_buf(),
                found: found.to_string(),
            });
        }
    }
    let doc: StoredDocument = serde_json::from_value(raw).map_err(|e| StoreError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let computed = content_hash(doc.kind, &doc.payload);
    if computed != doc.content_hash {
        return Err(StoreError::HashMismatch {
            path: path.to_path_buf(),
            recorded: doc.content_hash,
            computed,
        });
    }
    if doc.render() != bytes {
        return Err(StoreError::NonCanonical {
            path: path.to_path_buf(),
        });
    }
    Ok(doc)
}

/// Reads, verifies, checks the kind, and decodes in one go.
pub fn read_payload<T: DeserializeOwned>(path: &Path, kind: DocumentKind) -> Result<T, StoreError> {
    let doc = read_document(path)?;
    if doc.kind != kind {
        return Err(StoreError::Malformed {
            path: path.to_path_buf(),
            message: format!("expected a {} document, found {}", kind.as_str(), doc.kind.as_str()),
        });
    }
    doc.decode()
}
