//! Run directory with a JSON-lines manifest. Text artifacts end with a
//! `# aelstm <version> config=<hash>` line; binary checkpoints carry the
//! hash in their header.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::content_hash;
use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.jsonl";

pub fn stamp(config_hash: &str) -> String {
    format!("# aelstm {VERSION} config={config_hash}\n")
}

/// Config hash recorded in a stamped text artifact.
pub fn stamped_hash(text: &str) -> Option<&str> {
    text.lines().rev().find_map(|l| l.strip_prefix("# aelstm ")?.split_once(" config=").map(|(_, h)| h))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub kind: String,
    pub config_hash: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
    config_hash: String,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>, config_hash: &str) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root, config_hash: config_hash.to_string() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Path of an upstream artifact, or the stage that produces it.
    pub fn require(&self, rel: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, stage: stage.to_string() })
        }
    }

    pub fn write_text(&self, rel: &str, kind: &str, text: &str) -> Result<ManifestEntry> {
        let mut body = text.to_string();
        if !body.is_empty() && !body.ends_with('\n') {
            body.push('\n');
        }
        body.push_str(&stamp(&self.config_hash));
        self.write_bytes(rel, kind, body.as_bytes())
    }

    pub fn write_bytes(&self, rel: &str, kind: &str, bytes: &[u8]) -> Result<ManifestEntry> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        let entry = ManifestEntry {
            path: rel.to_string(),
            kind: kind.to_string(),
            config_hash: self.config_hash.clone(),
            sha256: content_hash(bytes),
            bytes: bytes.len() as u64,
        };
        self.record(&entry)?;
        Ok(entry)
    }

    /// JSON document `{aelstm_version, config_hash, data}`.
    pub fn write_json<T: Serialize>(&self, rel: &str, kind: &str, data: &T) -> Result<ManifestEntry> {
        let doc = serde_json::json!({ "aelstm_version": VERSION, "config_hash": self.config_hash, "data": data });
        let text = serde_json::to_string_pretty(&doc).expect("artifact serializes");
        self.write_bytes(rel, kind, text.as_bytes())
    }

    /// Entries in write order; a rewritten path keeps only its last entry.
    pub fn manifest(&self) -> Result<Vec<ManifestEntry>> {
        let p = self.path(MANIFEST);
        let text = match fs::read_to_string(&p) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&p, e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(format!("{MANIFEST} entry {}", i + 1), e.to_string())))
            .collect()
    }

    fn record(&self, entry: &ManifestEntry) -> Result<()> {
        let mut entries = self.manifest()?;
        entries.retain(|e| e.path != entry.path);
        entries.push(entry.clone());
        let mut text = String::new();
        for e in &entries {
            text.push_str(&serde_json::to_string(e).expect("entry serializes"));
            text.push('\n');
        }
        let p = self.path(MANIFEST);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    /// Entries whose file is missing or no longer matches its digest.
    pub fn verify(&self) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for e in self.manifest()? {
            match fs::read(self.path(&e.path)) {
                Ok(b) if content_hash(&b) == e.sha256 => {}
                _ => bad.push(e.path),
            }
        }
        Ok(bad)
    }
}

/// Payload of a [`RunDir::write_json`] document.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let data = doc.get_mut("data").map(serde_json::Value::take).ok_or_else(|| Error::format(path.display().to_string(), "missing `data`"))?;
    serde_json::from_value(data).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}
