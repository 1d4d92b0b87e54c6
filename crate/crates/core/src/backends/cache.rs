//! Content-addressed response cache.
//!
//! Layout: `{root}/{role}/{first two hex chars}/{digest}.json`, each file a
//! [`CacheRecord`]. Writes go to a temp file in the target directory and are
//! renamed into place, so concurrent writers of the same digest are safe.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    cache_key, digest_value, BackendError, ChatBackend, ChatRequest, Embedding, FrameEmbedder, Role, TextEmbedder,
};
use crate::timeline::VideoRef;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheRecord {
    pub request: Value,
    pub response: Value,
    pub created_at: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, role: Role, digest: &str) -> PathBuf {
        let shard = digest.get(..2).unwrap_or("00");
        self.root.join(role.as_str()).join(shard).join(format!("{digest}.json"))
    }

    /// Unreadable or corrupt records count as misses.
    pub fn get(&self, role: Role, digest: &str) -> Option<CacheRecord> {
        let text = std::fs::read_to_string(self.path_for(role, digest)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(&self, role: Role, digest: &str, request: Value, response: Value) -> Result<(), BackendError> {
        let path = self.path_for(role, digest);
        let dir = path.parent().expect("sharded path has a parent");
        std::fs::create_dir_all(dir)?;
        let record = CacheRecord {
            request,
            response,
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer_pretty(&mut tmp, &record).map_err(std::io::Error::from)?;
        tmp.write_all(b"\n")?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }
}

pub struct CachedChat<B> {
    inner: B,
    cache: ResponseCache,
    role: Role,
}

impl<B: ChatBackend> CachedChat<B> {
    pub fn new(inner: B, cache: ResponseCache, role: Role) -> Self {
        Self { inner, cache, role }
    }
}

impl<B: ChatBackend> ChatBackend for CachedChat<B> {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let digest = cache_key(req);
        if let Some(hit) = self.cache.get(self.role, &digest) {
            if let Some(text) = hit.response.as_str() {
                return Ok(text.to_owned());
            }
        }
        let text = self.inner.complete(req)?;
        let request = serde_json::to_value(req).expect("request serializes");
        self.cache.put(self.role, &digest, request, Value::String(text.clone()))?;
        Ok(text)
    }
}

fn cached_embeddings(
    cache: &ResponseCache,
    role: Role,
    request: Value,
    compute: impl FnOnce() -> Result<Vec<Embedding>, BackendError>,
) -> Result<Vec<Embedding>, BackendError> {
    let digest = digest_value(&request);
    if let Some(hit) = cache.get(role, &digest) {
        if let Ok(v) = serde_json::from_value::<Vec<Embedding>>(hit.response) {
            return Ok(v);
        }
    }
    let out = compute()?;
    cache.put(role, &digest, request, serde_json::to_value(&out).expect("embeddings serialize"))?;
    Ok(out)
}

pub struct CachedTextEmbedder<B> {
    inner: B,
    cache: ResponseCache,
    model: String,
}

impl<B: TextEmbedder> CachedTextEmbedder<B> {
    pub fn new(inner: B, cache: ResponseCache, model: impl Into<String>) -> Self {
        Self {
            inner,
            cache,
            model: model.into(),
        }
    }
}

impl<B: TextEmbedder> TextEmbedder for CachedTextEmbedder<B> {
    fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        let request = json!({"op": "embed_text", "model": self.model, "input": texts});
        cached_embeddings(&self.cache, Role::TextEmbedder, request, || self.inner.embed_text(texts))
    }
}

pub struct CachedFrameEmbedder<B> {
    inner: B,
    cache: ResponseCache,
    model: String,
}

impl<B: FrameEmbedder> CachedFrameEmbedder<B> {
    pub fn new(inner: B, cache: ResponseCache, model: impl Into<String>) -> Self {
        Self {
            inner,
            cache,
            model: model.into(),
        }
    }
}

impl<B: FrameEmbedder> FrameEmbedder for CachedFrameEmbedder<B> {
    fn embed_frames(&self, video: &VideoRef, timestamps_s: &[f64]) -> Result<Vec<Embedding>, BackendError> {
        let ts_ms: Vec<u64> = timestamps_s.iter().map(|t| (t * 1000.0).round() as u64).collect();
        let request = json!({
            "op": "embed_frames",
            "model": self.model,
            "video": video,
            "timestamps_ms": ts_ms,
        });
        cached_embeddings(&self.cache, Role::FrameEmbedder, request, || {
            self.inner.embed_frames(video, timestamps_s)
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::super::{Message, MockChat, MockFrameEmbedder, MockScript, MockTextEmbedder};
    use super::*;

    #[test]
    fn second_identical_request_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let mock = Arc::new(MockChat::from_map([]).with_responder(|_| Some("A, [5, 19]".into())));
        let cached = CachedChat::new(mock.clone(), ResponseCache::new(dir.path()), Role::Reasoner);
        let req = ChatRequest::new("m", vec![Message::user("q")]);
        assert_eq!(cached.complete(&req).unwrap(), "A, [5, 19]");
        assert_eq!(cached.complete(&req).unwrap(), "A, [5, 19]");
        assert_eq!(mock.calls(), 1);

        let digest = cache_key(&req);
        let path = dir.path().join("reasoner").join(&digest[..2]).join(format!("{digest}.json"));
        let record: CacheRecord = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(record.response, "A, [5, 19]");
        assert_eq!(record.request["model_name"], "m");
    }

    #[test]
    fn corrupt_record_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let req = ChatRequest::new("m", vec![Message::user("q")]);
        let path = cache.path_for(Role::Captioner, &cache_key(&req));
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, "{not json").unwrap();
        let mock = Arc::new(MockChat::from_map([]).with_responder(|_| Some("ok".into())));
        let cached = CachedChat::new(mock.clone(), cache, Role::Captioner);
        assert_eq!(cached.complete(&req).unwrap(), "ok");
        assert_eq!(mock.calls(), 1);
        assert!(std::fs::read_to_string(&path).unwrap().contains("\"ok\""));
    }

    #[test]
    fn embeddings_cached() {
        let dir = tempfile::tempdir().unwrap();
        let script = Arc::new(MockScript::default());
        let text = Arc::new(MockTextEmbedder::new(script.clone()));
        let frames = Arc::new(MockFrameEmbedder::new(script));
        let ct = CachedTextEmbedder::new(text.clone(), ResponseCache::new(dir.path()), "clip");
        let cf = CachedFrameEmbedder::new(frames.clone(), ResponseCache::new(dir.path()), "clip");
        let v = VideoRef::new("v", 2.0).unwrap();
        let a = ct.embed_text(&["x".into()]).unwrap();
        let b = ct.embed_text(&["x".into()]).unwrap();
        assert_eq!(a, b);
        let f1 = cf.embed_frames(&v, &[0.0, 1.0]).unwrap();
        let f2 = cf.embed_frames(&v, &[0.0, 1.0]).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(text.calls(), 1);
        assert_eq!(frames.calls(), 1);
    }

    #[test]
    fn concurrent_writers_same_digest() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        std::thread::scope(|s| {
            for i in 0..8 {
                let cache = cache.clone();
                s.spawn(move || {
                    cache
                        .put(Role::Reasoner, "abcd", json!({"i": i}), json!("same"))
                        .unwrap();
                });
            }
        });
        let hit = cache.get(Role::Reasoner, "abcd").unwrap();
        assert_eq!(hit.response, "same");
    }
}
