//! Content-addressed response cache: one JSON file per entry at
//! `<dir>/<first two hex chars>/<sha256 hex>.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatMessage, ChatRequest, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub response: String,
    pub created: DateTime<Utc>,
}

#[derive(Serialize)]
struct CanonicalChat<'a> {
    kind: &'static str,
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct CanonicalEmbedding<'a> {
    kind: &'static str,
    model: &'a str,
    text: &'a str,
}

fn digest_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("canonical form serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// SHA-256 over the canonical JSON of (model, messages, temperature, max_tokens).
pub fn cache_key(req: &ChatRequest) -> String {
    digest_json(&CanonicalChat {
        kind: "chat",
        model: &req.model,
        messages: &req.messages,
        temperature: req.temperature,
        max_tokens: req.max_tokens,
    })
}

pub fn embedding_cache_key(model: &str, text: &str) -> String {
    digest_json(&CanonicalEmbedding {
        kind: "embedding",
        model,
        text,
    })
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> GatewayError {
    GatewayError::Cache(format!("{}: {e}", path.display()))
}

impl ResponseCache {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| cache_err(&dir, e))?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("00");
        self.dir.join(shard).join(format!("{key}.json"))
    }

    pub fn get_entry(&self, key: &str) -> Result<Option<CacheEntry>, GatewayError> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(cache_err(&path, e)),
        };
        let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(|e| cache_err(&path, e))?;
        if entry.key != key {
            return Err(cache_err(&path, "entry key does not match file name"));
        }
        Ok(Some(entry))
    }

    pub fn get(&self, key: &str) -> Result<Option<String>, GatewayError> {
        Ok(self.get_entry(key)?.map(|e| e.response))
    }

    /// Atomic: write a temp file in the shard directory, then rename.
    pub fn put(&self, key: &str, response: &str) -> Result<(), GatewayError> {
        let path = self.path_for(key);
        let shard = path.parent().expect("entry path has a parent");
        fs::create_dir_all(shard).map_err(|e| cache_err(shard, e))?;
        let entry = CacheEntry {
            key: key.to_string(),
            response: response.to_string(),
            created: Utc::now(),
        };
        let json = serde_json::to_vec_pretty(&entry).map_err(|e| cache_err(&path, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(shard).map_err(|e| cache_err(shard, e))?;
        tmp.write_all(&json).map_err(|e| cache_err(&path, e))?;
        tmp.persist(&path).map_err(|e| cache_err(&path, e.error))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        let Ok(shards) = fs::read_dir(&self.dir) else {
            return 0;
        };
        shards
            .flatten()
            .filter_map(|s| fs::read_dir(s.path()).ok())
            .flat_map(|d| d.flatten())
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> ChatRequest {
        ChatRequest {
            model: "gpt".into(),
            messages: vec![ChatMessage::system("s"), ChatMessage::user("u")],
            temperature: 0.0,
            max_tokens: 64,
        }
    }

    #[test]
    fn key_properties() {
        let a = req();
        assert_eq!(cache_key(&a), cache_key(&a.clone()));
        assert_eq!(cache_key(&a).len(), 64);

        let mut t = a.clone();
        t.temperature = 0.7;
        assert_ne!(cache_key(&a), cache_key(&t));

        let mut r = a.clone();
        r.messages.reverse();
        assert_ne!(cache_key(&a), cache_key(&r));

        let mut m = a.clone();
        m.max_tokens = 65;
        assert_ne!(cache_key(&a), cache_key(&m));

        assert_ne!(embedding_cache_key("gpt", "u"), embedding_cache_key("other", "u"));
    }

    #[test]
    fn key_is_stable_across_runs() {
        // Frozen digest of the canonical serialization; changes here
        // invalidate every existing cache directory.
        let canonical = r#"{"kind":"chat","model":"gpt","messages":[{"role":"system","content":"s"},{"role":"user","content":"u"}],"temperature":0.0,"max_tokens":64}"#;
        assert_eq!(cache_key(&req()), hex::encode(Sha256::digest(canonical.as_bytes())));
    }

    #[test]
    fn put_get_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = cache_key(&req());
        assert_eq!(cache.get(&key).unwrap(), None);
        cache.put(&key, "Joy").unwrap();
        assert_eq!(cache.get(&key).unwrap().as_deref(), Some("Joy"));
        let path = cache.path_for(&key);
        assert!(path.starts_with(dir.path().join(&key[..2])));
        assert_eq!(cache.len(), 1);
        // overwrite is atomic and last-writer-wins
        cache.put(&key, "Anger").unwrap();
        assert_eq!(cache.get(&key).unwrap().as_deref(), Some("Anger"));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn corrupt_entries_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = cache_key(&req());
        let path = cache.path_for(&key);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, "not json").unwrap();
        assert!(matches!(cache.get(&key), Err(GatewayError::Cache(_))));
    }
}
