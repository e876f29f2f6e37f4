use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{elapsed_ms, GatewayError, Generator, GeneratorRequest, GeneratorResponse};

/// Hex digest over the backend id and every request field.
pub fn cache_key(backend_id: &str, request: &GeneratorRequest) -> String {
    let payload = serde_json::to_vec(&(backend_id, request)).expect("request serializes");
    hex::encode(Sha256::digest(&payload))
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    backend_id: String,
    request: GeneratorRequest,
    text: String,
}

/// Directory of `<hex digest>.json` entries. Writes go through a temp file
/// and an atomic rename, so a reader never observes a partial entry.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(ResponseCache {
            dir,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .expect("cache lock table")
            .entry(key.to_string())
            .or_default()
            .clone()
    }

    fn read(&self, key: &str, backend_id: &str, request: &GeneratorRequest) -> Option<String> {
        let raw = std::fs::read(self.entry_path(key)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&raw) {
            Ok(entry)
                if entry.key == key
                    && entry.backend_id == backend_id
                    && entry.request == *request =>
            {
                Some(entry.text)
            }
            _ => {
                tracing::warn!(key, "ignoring corrupt cache entry");
                None
            }
        }
    }

    fn write(&self, entry: &CacheEntry) -> Result<(), GatewayError> {
        let err = |e: std::io::Error| GatewayError::Cache(e.to_string());
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(err)?;
        serde_json::to_writer_pretty(&mut tmp, entry)
            .map_err(|e| GatewayError::Cache(e.to_string()))?;
        tmp.flush().map_err(err)?;
        tmp.persist(self.entry_path(&entry.key))
            .map_err(|e| GatewayError::Cache(e.to_string()))?;
        Ok(())
    }

    /// Returns the cached response for `request`, calling `backend` only on
    /// a miss (or when the stored entry is unreadable).
    pub fn get_or_generate<G: Generator + ?Sized>(
        &self,
        backend: &G,
        request: &GeneratorRequest,
    ) -> Result<GeneratorResponse, GatewayError> {
        request.validate()?;
        let start = Instant::now();
        let backend_id = backend.backend_id();
        let key = cache_key(backend_id, request);
        let lock = self.key_lock(&key);
        let _guard = lock.lock().expect("cache key lock");
        if let Some(text) = self.read(&key, backend_id, request) {
            return Ok(GeneratorResponse {
                text,
                backend_id: backend_id.to_string(),
                cached: true,
                latency_ms: elapsed_ms(start),
            });
        }
        let response = backend.generate(request)?;
        self.write(&CacheEntry {
            key,
            backend_id: backend_id.to_string(),
            request: request.clone(),
            text: response.text.clone(),
        })?;
        Ok(response)
    }
}

pub fn cached_generate<G: Generator + ?Sized>(
    cache: &ResponseCache,
    backend: &G,
    request: &GeneratorRequest,
) -> Result<GeneratorResponse, GatewayError> {
    cache.get_or_generate(backend, request)
}

/// A backend with a response cache in front of it.
pub struct CachedGenerator<G> {
    inner: G,
    cache: ResponseCache,
}

impl<G: Generator> CachedGenerator<G> {
    pub fn new(inner: G, cache: ResponseCache) -> Self {
        CachedGenerator { inner, cache }
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }
}

impl<G: Generator> Generator for CachedGenerator<G> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorResponse, GatewayError> {
        self.cache.get_or_generate(&self.inner, request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CountingBackend, FnBackend};
    use proptest::prelude::*;

    fn echo() -> CountingBackend<impl Generator> {
        CountingBackend::new(FnBackend::new("echo", |r: &GeneratorRequest| {
            Ok(format!("{}:{}", r.template_id, r.rendered_prompt.len()))
        }))
    }

    #[test]
    fn second_identical_request_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let backend = echo();
        let req = GeneratorRequest::new("t", "hello");
        let a = cache.get_or_generate(&backend, &req).unwrap();
        let b = cache.get_or_generate(&backend, &req).unwrap();
        assert!(!a.cached);
        assert!(b.cached);
        assert_eq!(a.text, b.text);
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn every_request_field_is_part_of_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let backend = echo();
        let a = GeneratorRequest::new("t", "hello");
        let mut b = a.clone();
        b.max_tokens = 7;
        cache.get_or_generate(&backend, &a).unwrap();
        cache.get_or_generate(&backend, &b).unwrap();
        assert_eq!(backend.calls(), 2);
        assert_ne!(cache_key("x", &a), cache_key("x", &b));
        assert_ne!(cache_key("x", &a), cache_key("y", &a));
    }

    #[test]
    fn corrupt_entry_is_regenerated_and_replaced() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let backend = echo();
        let req = GeneratorRequest::new("t", "hello");
        cache.get_or_generate(&backend, &req).unwrap();
        let path = cache.entry_path(&cache_key("echo", &req));
        // simulate a torn write from an interrupted process
        std::fs::write(&path, b"{\"key\": \"tru").unwrap();
        let again = cache.get_or_generate(&backend, &req).unwrap();
        assert!(!again.cached);
        assert_eq!(backend.calls(), 2);
        let third = cache.get_or_generate(&backend, &req).unwrap();
        assert!(third.cached);
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn no_temp_files_left_behind() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let backend = echo();
        for i in 0..5 {
            cache
                .get_or_generate(&backend, &GeneratorRequest::new("t", format!("p{i}")))
                .unwrap();
        }
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names.len(), 5);
        assert!(names.iter().all(|n| n.len() == 64 + 5 && n.ends_with(".json")));
    }

    #[test]
    fn concurrent_identical_requests_call_backend_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let backend = echo();
        let req = GeneratorRequest::new("t", "shared");
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| cache.get_or_generate(&backend, &req).unwrap());
            }
        });
        assert_eq!(backend.calls(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn invocations_equal_distinct_keys(picks in proptest::collection::vec(0usize..12, 1..1000)) {
            let dir = tempfile::tempdir().unwrap();
            let cache = ResponseCache::open(dir.path()).unwrap();
            let backend = echo();
            let requests: Vec<_> = (0..12)
                .map(|i| {
                    let mut r = GeneratorRequest::new(format!("t{}", i % 3), format!("prompt {}", i / 3));
                    r.seed = Some(i as u64 % 2);
                    r
                })
                .collect();
            let mut first: HashMap<usize, String> = HashMap::new();
            for &p in &picks {
                let resp = cache.get_or_generate(&backend, &requests[p]).unwrap();
                let prev = first.entry(p).or_insert_with(|| resp.text.clone());
                prop_assert_eq!(prev.as_str(), resp.text.as_str());
            }
            prop_assert_eq!(backend.calls(), first.len());
        }
    }
}
