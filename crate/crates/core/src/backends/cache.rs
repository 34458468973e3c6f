//! Content-addressed response cache and in-flight request deduplication.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::{Backend, BackendError, BackendRole, Request, Response};
use crate::events;

/// Serializes a JSON value with object keys sorted at every level.
pub fn canonical_json(value: &serde_json::Value) -> String {
    fn write(value: &serde_json::Value, out: &mut String) {
        match value {
            serde_json::Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&serde_json::Value::String(k.clone()).to_string());
                    out.push(':');
                    write(&map[k], out);
                }
                out.push('}');
            }
            serde_json::Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            scalar => out.push_str(&scalar.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

/// SHA-256 over backend id, endpoint and canonical request JSON.
pub fn cache_key(backend_id: &str, endpoint: &str, request: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(backend_id.as_bytes());
    h.update([0u8]);
    h.update(endpoint.as_bytes());
    h.update([0u8]);
    h.update(canonical_json(request).as_bytes());
    hex::encode(h.finalize())
}

pub fn request_key(backend_id: &str, request: &Request) -> String {
    cache_key(backend_id, request.endpoint().name(), &request.to_json())
}

/// On-disk store of raw response bodies keyed by [`cache_key`].
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get_bytes(&self, key: &str) -> Option<Vec<u8>> {
        fs::read(self.path(key)).ok()
    }

    pub fn put_bytes(&self, key: &str, bytes: &[u8]) -> std::io::Result<()> {
        let path = self.path(key);
        fs::create_dir_all(path.parent().expect("cache path has a parent"))?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)
    }

    fn lookup(&self, key: &str, request: &Request) -> Option<Response> {
        let bytes = self.get_bytes(key)?;
        match Response::from_json_bytes(request.endpoint(), &bytes) {
            Ok(r) if r.validate(request).is_ok() => Some(r),
            _ => {
                log::warn!("ignoring corrupt cache entry {}", self.path(key).display());
                None
            }
        }
    }

    fn store(&self, key: &str, response: &Response) {
        if let Err(e) = self.put_bytes(key, &response.to_json_bytes()) {
            log::warn!("failed to write cache entry {key}: {e}");
        }
    }
}

/// Serves `request` from `cache` if present, else calls `backend` and stores
/// the response.
pub fn cached_call(
    cache: &ResponseCache,
    backend: &dyn Backend,
    request: &Request,
) -> Result<Response, BackendError> {
    let key = request_key(backend.id(), request);
    if let Some(hit) = cache.lookup(&key, request) {
        return Ok(hit);
    }
    let response = backend.call(request)?;
    cache.store(&key, &response);
    Ok(response)
}

type Shared = Result<Response, BackendError>;

#[derive(Default)]
struct Slot {
    result: Mutex<Option<Shared>>,
    ready: Condvar,
}

impl Slot {
    fn wait(&self) -> Shared {
        let mut guard = self.result.lock().unwrap();
        while guard.is_none() {
            guard = self.ready.wait(guard).unwrap();
        }
        guard.clone().unwrap()
    }

    fn fill(&self, value: Shared) {
        *self.result.lock().unwrap() = Some(value);
        self.ready.notify_all();
    }
}

/// Wraps a backend with an optional disk cache; concurrent identical
/// requests share a single upstream call.
pub struct CachedBackend {
    inner: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    inflight: Mutex<HashMap<String, Arc<Slot>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn Backend>, cache: Option<ResponseCache>) -> Self {
        Self {
            inner,
            cache,
            inflight: Mutex::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// Upstream calls made (cache misses that were not deduplicated).
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    fn upstream(&self, key: &str, request: &Request) -> Shared {
        let start = Instant::now();
        self.misses.fetch_add(1, Ordering::SeqCst);
        let result = self.inner.call(request);
        if let (Some(cache), Ok(response)) = (&self.cache, &result) {
            cache.store(key, response);
        }
        events::Event::new("backend")
            .backend(self.inner.id())
            .endpoint(request.endpoint().name())
            .cache("miss")
            .duration(start.elapsed())
            .emit();
        result
    }
}

impl Backend for CachedBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn role(&self) -> BackendRole {
        self.inner.role()
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        let key = request_key(self.inner.id(), request);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.lookup(&key, request)) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            events::Event::new("backend")
                .backend(self.inner.id())
                .endpoint(request.endpoint().name())
                .cache("hit")
                .emit();
            return Ok(hit);
        }

        let (slot, leader) = {
            let mut inflight = self.inflight.lock().unwrap();
            match inflight.get(&key) {
                Some(slot) => (slot.clone(), false),
                None => {
                    let slot = Arc::new(Slot::default());
                    inflight.insert(key.clone(), slot.clone());
                    (slot, true)
                }
            }
        };
        if !leader {
            return slot.wait();
        }
        let result = self.upstream(&key, request);
        slot.fill(result.clone());
        self.inflight.lock().unwrap().remove(&key);
        result
    }
}
