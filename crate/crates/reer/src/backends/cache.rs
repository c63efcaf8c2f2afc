//! Content-addressed reply cache with single-flight deduplication.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::BackendError;

use super::{BackendReply, CompletionRequest, TextCompletion};

type FlightCell = Arc<OnceLock<Result<BackendReply, String>>>;

/// Caches replies on disk, one file per request hash, the value being
/// the canonical JSON serialization of the reply. Concurrent requests
/// for the same key resolve to a single upstream call; errors are never
/// written to disk; a corrupt cache file is treated as a miss with a
/// warning.
pub struct CachedBackend<B> {
    inner: B,
    root: PathBuf,
    in_flight: Mutex<HashMap<String, FlightCell>>,
}

impl<B: TextCompletion> CachedBackend<B> {
    pub fn new(inner: B, root: impl Into<PathBuf>) -> std::io::Result<CachedBackend<B>> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(CachedBackend {
            inner,
            root,
            in_flight: Mutex::new(HashMap::new()),
        })
    }

    fn path_for(&self, hash: &str) -> PathBuf {
        self.root.join(format!("{hash}.json"))
    }

    fn read_cached(&self, hash: &str) -> Option<BackendReply> {
        let path = self.path_for(hash);
        let bytes = std::fs::read(&path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(reply) => Some(reply),
            Err(err) => {
                log::warn!(
                    "cache entry {} is corrupt, treating as miss: {err}",
                    path.display()
                );
                None
            }
        }
    }

    fn write_cached(&self, hash: &str, reply: &BackendReply) {
        let path = self.path_for(hash);
        let tmp = self.root.join(format!(
            ".tmp-{hash}-{}",
            std::process::id()
        ));
        let bytes = serde_json::to_vec(reply).expect("reply serializes");
        if std::fs::write(&tmp, &bytes)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .is_err()
        {
            log::warn!("failed to persist cache entry {}", path.display());
            let _ = std::fs::remove_file(&tmp);
        }
    }
}

impl<B: TextCompletion> TextCompletion for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<BackendReply, BackendError> {
        let hash = req.request_hash();
        if let Some(reply) = self.read_cached(&hash) {
            return Ok(reply);
        }

        let cell = {
            let mut map = self.in_flight.lock().unwrap();
            Arc::clone(map.entry(hash.clone()).or_default())
        };
        // The cell is written before the map entry is removed, so any
        // thread that misses the entry afterwards finds the file.
        let outcome = cell.get_or_init(|| {
            if let Some(reply) = self.read_cached(&hash) {
                return Ok(reply);
            }
            match self.inner.complete(req) {
                Ok(reply) => {
                    self.write_cached(&hash, &reply);
                    Ok(reply)
                }
                Err(err) => Err(err.to_string()),
            }
        });
        let result = match outcome {
            Ok(reply) => Ok(reply.clone()),
            Err(message) => Err(BackendError::Transport {
                attempts: 1,
                message: message.clone(),
            }),
        };
        self.in_flight.lock().unwrap().remove(&hash);
        result
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::super::ScriptedBackend;
    use super::*;

    fn setup(text: &str) -> (CachedBackend<ScriptedBackend>, CompletionRequest) {
        let inner = ScriptedBackend::new();
        let req = CompletionRequest::generation("m", "prompt", 8);
        inner.insert_text(&req, text);
        let dir = tempfile::tempdir().unwrap();
        let cache = CachedBackend::new(inner, dir.path().join("cache")).unwrap();
        // keep the tempdir alive for the duration of the test
        std::mem::forget(dir);
        (cache, req)
    }

    #[test]
    fn second_identical_request_hits_the_cache() {
        let (cache, req) = setup("cached text");
        let first = cache.complete(&req).unwrap();
        let second = cache.complete(&req).unwrap();
        assert_eq!(cache.inner.calls(), 1);
        assert_eq!(first, second);
        let a = serde_json::to_vec(&first).unwrap();
        let b = serde_json::to_vec(&second).unwrap();
        assert_eq!(a, b, "cache hit must be byte-identical");
    }

    #[test]
    fn different_sampling_is_a_distinct_key() {
        let (cache, req) = setup("base");
        cache.complete(&req).unwrap();
        let other = req.clone().with_sampling("temperature", serde_json::json!(0.2));
        cache.inner.insert_text(&other, "warm");
        let reply = cache.complete(&other).unwrap();
        assert_eq!(reply.text.as_deref(), Some("warm"));
        assert_eq!(cache.inner.calls(), 2);
    }

    #[test]
    fn concurrent_identical_requests_resolve_to_one_upstream_call() {
        let inner = ScriptedBackend::new().with_delay(std::time::Duration::from_millis(10));
        let req = CompletionRequest::generation("m", "prompt", 8);
        inner.insert_text(&req, "single flight");
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(CachedBackend::new(inner, dir.path().join("c")).unwrap());

        let mut handles = Vec::new();
        for _ in 0..100 {
            let cache = Arc::clone(&cache);
            let req = req.clone();
            handles.push(std::thread::spawn(move || cache.complete(&req).unwrap()));
        }
        let replies: Vec<BackendReply> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(cache.inner.calls(), 1, "exactly one upstream call");
        assert!(replies.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn corrupt_cache_entry_is_a_miss() {
        let (cache, req) = setup("fresh");
        cache.complete(&req).unwrap();
        std::fs::write(cache.path_for(&req.request_hash()), b"{ not json").unwrap();
        let reply = cache.complete(&req).unwrap();
        assert_eq!(reply.text.as_deref(), Some("fresh"));
        assert_eq!(cache.inner.calls(), 2);
    }

    #[test]
    fn errors_are_not_cached() {
        let inner = ScriptedBackend::new();
        let req = CompletionRequest::generation("m", "p", 8);
        let dir = tempfile::tempdir().unwrap();
        let cache = CachedBackend::new(inner, dir.path().join("c")).unwrap();
        assert!(cache.complete(&req).is_err());
        cache.inner.insert_text(&req, "now present");
        assert_eq!(
            cache.complete(&req).unwrap().text.as_deref(),
            Some("now present")
        );
    }
}
