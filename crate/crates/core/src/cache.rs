//! Content addressing, the JSONL replay store and the on-disk stage artifact
//! store.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(data: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(data.as_ref()))
}

/// Hash of an ordered tuple of strings. Each part is length-prefixed so
/// `("ab", "c")` and `("a", "bc")` never collide.
pub fn content_key<S: AsRef<str>>(parts: &[S]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        let p = p.as_ref().as_bytes();
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReplayLine {
    key_hash: String,
    output: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreMode {
    /// Lookups only; nothing is written.
    ReadOnly,
    /// New outputs are appended. The first output recorded for a key wins.
    Record,
}

/// Recorded model outputs keyed by content hash, persisted as JSONL lines of
/// `{"key_hash": ..., "output": ...}`.
#[derive(Debug)]
pub struct ReplayStore {
    path: Option<PathBuf>,
    mode: StoreMode,
    entries: RwLock<HashMap<String, Value>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl ReplayStore {
    /// An empty store that is never persisted.
    pub fn in_memory() -> Self {
        ReplayStore {
            path: None,
            mode: StoreMode::Record,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    pub fn open(path: impl AsRef<Path>, mode: StoreMode) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        match File::open(&path) {
            Ok(f) => {
                for (i, line) in BufReader::new(f).lines().enumerate() {
                    let line = line.map_err(|e| Error::io(&path, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: ReplayLine = serde_json::from_str(&line).map_err(|source| Error::Json {
                        path: path.clone(),
                        line: i + 1,
                        source,
                    })?;
                    entries.entry(rec.key_hash).or_insert(rec.output);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && mode == StoreMode::Record => {}
            Err(e) => return Err(Error::io(&path, e)),
        }
        Ok(ReplayStore {
            path: Some(path),
            mode,
            entries: RwLock::new(entries),
            writer: Mutex::new(None),
        })
    }

    pub fn mode(&self) -> StoreMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of every stored entry.
    pub fn snapshot(&self) -> HashMap<String, Value> {
        self.entries.read().unwrap().clone()
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.entries.read().unwrap().get(key).cloned()
    }

    /// Returns the stored output, which may differ from `output` if another
    /// writer got there first.
    pub fn record(&self, key: &str, output: Value) -> Result<Value> {
        if self.mode == StoreMode::ReadOnly {
            return Err(Error::Config("replay store is read-only".into()));
        }
        let mut entries = self.entries.write().unwrap();
        if let Some(existing) = entries.get(key) {
            return Ok(existing.clone());
        }
        if let Some(path) = &self.path {
            let mut w = self.writer.lock().unwrap();
            if w.is_none() {
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                *w = Some(BufWriter::new(f));
            }
            let line = serde_json::to_string(&ReplayLine {
                key_hash: key.to_string(),
                output: output.clone(),
            })
            .expect("json values always serialize");
            let w = w.as_mut().unwrap();
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        entries.insert(key.to_string(), output.clone());
        Ok(output)
    }

    /// Rewrites the backing file with entries sorted by key, so recorded
    /// stores are stable regardless of completion order.
    pub fn compact(&self) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        if self.mode == StoreMode::ReadOnly {
            return Ok(());
        }
        let mut w = self.writer.lock().unwrap();
        *w = None;
        let entries = self.entries.read().unwrap();
        let mut keys: Vec<&String> = entries.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            out.push_str(
                &serde_json::to_string(&ReplayLine {
                    key_hash: k.clone(),
                    output: entries[k].clone(),
                })
                .unwrap(),
            );
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }
}

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = path.with_extension(format!("tmp.{}.{n}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Stage outputs stored as `<root>/<stage>/<key>.json`. Writes are atomic and
/// identical keys always hold identical content.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(format!("{key}.json"))
    }

    pub fn get<T: DeserializeOwned>(&self, stage: &str, key: &str) -> Result<Option<T>> {
        let path = self.path(stage, key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|source| Error::Json { path, line: 1, source }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put<T: Serialize>(&self, stage: &str, key: &str, value: &T) -> Result<()> {
        let path = self.path(stage, key);
        let bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
        write_atomic(&path, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn content_key_is_prefix_free() {
        assert_ne!(content_key(&["ab", "c"]), content_key(&["a", "bc"]));
        assert_eq!(content_key(&["x", "y"]), content_key(&["x".to_string(), "y".to_string()]));
    }

    #[test]
    fn replay_store_first_writer_wins_and_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        {
            let s = ReplayStore::open(&path, StoreMode::Record).unwrap();
            assert_eq!(s.record("k1", json!("a")).unwrap(), json!("a"));
            assert_eq!(s.record("k1", json!("b")).unwrap(), json!("a"));
            s.record("k0", json!({"x": 1})).unwrap();
            s.compact().unwrap();
        }
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("\"k0\""));
        let ro = ReplayStore::open(&path, StoreMode::ReadOnly).unwrap();
        assert_eq!(ro.get("k1"), Some(json!("a")));
        assert!(ro.record("k2", json!(1)).is_err());
    }

    #[test]
    fn read_only_store_requires_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ReplayStore::open(dir.path().join("missing.jsonl"), StoreMode::ReadOnly).is_err());
    }

    #[test]
    fn artifact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(dir.path());
        assert_eq!(store.get::<Vec<u32>>("s", "k").unwrap(), None);
        store.put("s", "k", &vec![1u32, 2]).unwrap();
        assert_eq!(store.get::<Vec<u32>>("s", "k").unwrap(), Some(vec![1, 2]));
    }
}
