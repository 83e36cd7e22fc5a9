//! Embedded schemaless document store.
//!
//! Documents are JSON values addressed by `(collection, id)`. Single-document
//! writes are atomic, and [`DocumentStore::create`] / [`DocumentStore::compare_and_set`]
//! provide the compare-and-set primitive used for idempotency keys and
//! catalog versions.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt document {collection}/{id}: {reason}")]
    Corrupt {
        collection: String,
        id: String,
        reason: String,
    },
}

pub type StoreResult<T> = Result<T, StoreError>;

pub trait DocumentStore: Send + Sync {
    fn get(&self, collection: &str, id: &str) -> StoreResult<Option<Value>>;

    /// Writes unconditionally, replacing any existing document.
    fn put(&self, collection: &str, id: &str, doc: &Value) -> StoreResult<()>;

    /// Writes only if absent. Returns `false` when the id already exists.
    fn create(&self, collection: &str, id: &str, doc: &Value) -> StoreResult<bool>;

    /// Replaces the document only if its current value equals `expected`
    /// (`None` meaning absent).
    fn compare_and_set(
        &self,
        collection: &str,
        id: &str,
        expected: Option<&Value>,
        new: &Value,
    ) -> StoreResult<bool>;

    fn delete(&self, collection: &str, id: &str) -> StoreResult<()>;

    /// All documents whose id starts with `prefix`, ordered by id.
    fn list_prefix(&self, collection: &str, prefix: &str) -> StoreResult<Vec<(String, Value)>>;

    fn list(&self, collection: &str) -> StoreResult<Vec<(String, Value)>> {
        self.list_prefix(collection, "")
    }
}

type Key = (String, String);

fn range<'a>(
    map: &'a BTreeMap<Key, Value>,
    collection: &str,
    prefix: &str,
) -> impl Iterator<Item = (String, Value)> + 'a {
    let start = (collection.to_string(), prefix.to_string());
    let collection = collection.to_string();
    let prefix = prefix.to_string();
    map.range(start..)
        .take_while(move |((c, id), _)| *c == collection && id.starts_with(&prefix))
        .map(|((_, id), v)| (id.clone(), v.clone()))
}

/// Volatile store for tests and tooling.
#[derive(Debug, Default)]
pub struct MemoryStore {
    docs: RwLock<BTreeMap<Key, Value>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

fn key(collection: &str, id: &str) -> Key {
    (collection.to_string(), id.to_string())
}

impl DocumentStore for MemoryStore {
    fn get(&self, collection: &str, id: &str) -> StoreResult<Option<Value>> {
        Ok(self.docs.read().unwrap().get(&key(collection, id)).cloned())
    }

    fn put(&self, collection: &str, id: &str, doc: &Value) -> StoreResult<()> {
        self.docs.write().unwrap().insert(key(collection, id), doc.clone());
        Ok(())
    }

    fn create(&self, collection: &str, id: &str, doc: &Value) -> StoreResult<bool> {
        self.compare_and_set(collection, id, None, doc)
    }

    fn compare_and_set(&self, collection: &str, id: &str, expected: Option<&Value>, new: &Value) -> StoreResult<bool> {
        let mut docs = self.docs.write().unwrap();
        let k = key(collection, id);
        if docs.get(&k) != expected {
            return Ok(false);
        }
        docs.insert(k, new.clone());
        Ok(true)
    }

    fn delete(&self, collection: &str, id: &str) -> StoreResult<()> {
        self.docs.write().unwrap().remove(&key(collection, id));
        Ok(())
    }

    fn list_prefix(&self, collection: &str, prefix: &str) -> StoreResult<Vec<(String, Value)>> {
        Ok(range(&self.docs.read().unwrap(), collection, prefix).collect())
    }
}

/// Filesystem-backed store: one JSON file per document under
/// `<root>/<collection>/<encoded id>.json`, written by temp-file + rename.
///
/// All documents are loaded at open and served from memory; writes go to
/// disk before the in-memory view changes.
#[derive(Debug)]
pub struct FsStore {
    root: PathBuf,
    docs: RwLock<BTreeMap<Key, Value>>,
}

/// Encodes an id as a file name: `[A-Za-z0-9._-]` kept, everything else `%XX`.
fn encode_id(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-') || (b == b'.' && !out.is_empty()) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn decode_id(name: &str) -> Option<String> {
    let bytes = name.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = name.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

/// Writes `bytes` to `path` atomically and durably.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().expect("document path has a parent");
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("doc")
    ));
    {
        let mut file = File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    sync_dir(dir)
}

pub fn sync_dir(dir: &Path) -> io::Result<()> {
    #[cfg(unix)]
    {
        File::open(dir)?.sync_all()?;
    }
    #[cfg(not(unix))]
    {
        let _ = dir;
    }
    Ok(())
}

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> StoreResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut docs = BTreeMap::new();
        for collection in fs::read_dir(&root)? {
            let collection = collection?;
            if !collection.file_type()?.is_dir() {
                continue;
            }
            let Some(cname) = collection.file_name().to_str().and_then(decode_id) else {
                continue;
            };
            for entry in fs::read_dir(collection.path())? {
                let entry = entry?;
                let name = entry.file_name();
                let Some(name) = name.to_str() else { continue };
                // Leftover temp files from an interrupted write are not documents.
                let Some(stem) = name.strip_suffix(".json").filter(|_| !name.starts_with('.')) else {
                    if name.ends_with(".tmp") {
                        let _ = fs::remove_file(entry.path());
                    }
                    continue;
                };
                let id = decode_id(stem).ok_or_else(|| StoreError::Corrupt {
                    collection: cname.clone(),
                    id: stem.to_string(),
                    reason: "undecodable file name".into(),
                })?;
                let bytes = fs::read(entry.path())?;
                let doc: Value = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                    collection: cname.clone(),
                    id: id.clone(),
                    reason: e.to_string(),
                })?;
                docs.insert((cname.clone(), id), doc);
            }
        }
        Ok(Self {
            root,
            docs: RwLock::new(docs),
        })
    }

    fn path(&self, collection: &str, id: &str) -> PathBuf {
        self.root
            .join(encode_id(collection))
            .join(format!("{}.json", encode_id(id)))
    }

    fn write(&self, collection: &str, id: &str, doc: &Value) -> StoreResult<()> {
        let bytes = serde_json::to_vec(doc).expect("JSON values serialize");
        write_atomic(&self.path(collection, id), &bytes)?;
        Ok(())
    }
}

impl DocumentStore for FsStore {
    fn get(&self, collection: &str, id: &str) -> StoreResult<Option<Value>> {
        Ok(self.docs.read().unwrap().get(&key(collection, id)).cloned())
    }

    fn put(&self, collection: &str, id: &str, doc: &Value) -> StoreResult<()> {
        let mut docs = self.docs.write().unwrap();
        self.write(collection, id, doc)?;
        docs.insert(key(collection, id), doc.clone());
        Ok(())
    }

    fn create(&self, collection: &str, id: &str, doc: &Value) -> StoreResult<bool> {
        self.compare_and_set(collection, id, None, doc)
    }

    fn compare_and_set(&self, collection: &str, id: &str, expected: Option<&Value>, new: &Value) -> StoreResult<bool> {
        let mut docs = self.docs.write().unwrap();
        let k = key(collection, id);
        if docs.get(&k) != expected {
            return Ok(false);
        }
        self.write(collection, id, new)?;
        docs.insert(k, new.clone());
        Ok(true)
    }

    fn delete(&self, collection: &str, id: &str) -> StoreResult<()> {
        let mut docs = self.docs.write().unwrap();
        match fs::remove_file(self.path(collection, id)) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        docs.remove(&key(collection, id));
        Ok(())
    }

    fn list_prefix(&self, collection: &str, prefix: &str) -> StoreResult<Vec<(String, Value)>> {
        Ok(range(&self.docs.read().unwrap(), collection, prefix).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn exercise(store: &dyn DocumentStore) {
        assert!(store.create("c", "a/1", &json!({"v": 1})).unwrap());
        assert!(!store.create("c", "a/1", &json!({"v": 2})).unwrap());
        assert_eq!(store.get("c", "a/1").unwrap(), Some(json!({"v": 1})));
        assert!(!store.compare_and_set("c", "a/1", Some(&json!({"v": 9})), &json!({"v": 3})).unwrap());
        assert!(store.compare_and_set("c", "a/1", Some(&json!({"v": 1})), &json!({"v": 3})).unwrap());
        store.put("c", "a/2", &json!(2)).unwrap();
        store.put("c", "b/1", &json!(3)).unwrap();
        store.put("d", "a/9", &json!(4)).unwrap();
        let ids: Vec<_> = store.list_prefix("c", "a/").unwrap().into_iter().map(|(id, _)| id).collect();
        assert_eq!(ids, ["a/1", "a/2"]);
        assert_eq!(store.list("c").unwrap().len(), 3);
        store.delete("c", "a/2").unwrap();
        store.delete("c", "missing").unwrap();
        assert_eq!(store.get("c", "a/2").unwrap(), None);
    }

    #[test]
    fn memory_store_contract() {
        exercise(&MemoryStore::new());
    }

    #[test]
    fn fs_store_contract_and_persistence() {
        let dir = tempfile::tempdir().unwrap();
        exercise(&FsStore::open(dir.path()).unwrap());
        let reopened = FsStore::open(dir.path()).unwrap();
        assert_eq!(reopened.get("c", "a/1").unwrap(), Some(json!({"v": 3})));
        assert_eq!(reopened.get("c", "b/1").unwrap(), Some(json!(3)));
        assert_eq!(reopened.get("d", "a/9").unwrap(), Some(json!(4)));
        assert_eq!(reopened.get("c", "a/2").unwrap(), None);
    }

    #[test]
    fn leftover_temp_files_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("c")).unwrap();
        fs::write(dir.path().join("c/.x.json.tmp"), b"{\"half").unwrap();
        let store = FsStore::open(dir.path()).unwrap();
        assert!(store.list("c").unwrap().is_empty());
    }

    #[test]
    fn id_encoding_round_trips() {
        for id in ["plain", "a/b:c", ".hidden", "100%", "é"] {
            let enc = encode_id(id);
            assert!(!enc.starts_with('.'));
            assert!(!enc.contains('/'));
            assert_eq!(decode_id(&enc).unwrap(), id);
        }
    }
}
