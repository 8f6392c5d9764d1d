//! Content-addressed response cache with record/replay.
//!
//! Layout: one file per request, `<dir>/<sha256-hex>.json`, holding
//! `{request, response, model_id, timestamp}`. The key is the SHA-256 of the
//! JSON-serialized request `{model_id, op, context, continuations, params}`.
//! Writes go to a temporary file in the same directory and are renamed into
//! place, so readers never observe partial entries.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, BackendInfo, GenParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    /// Serve hits, compute and store misses.
    Record,
    /// Serve hits; a miss is an error.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheRequest {
    model_id: String,
    op: String,
    context: String,
    #[serde(default)]
    continuations: Option<Vec<String>>,
    #[serde(default)]
    params: Option<GenParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    request: Value,
    pub response: Value,
    pub model_id: String,
    pub timestamp: u64,
}

pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
    mode: CacheMode,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>, mode: CacheMode) -> Result<Self, BackendError> {
        let dir = dir.into();
        match mode {
            CacheMode::Record => fs::create_dir_all(&dir).map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?,
            CacheMode::Replay if !dir.is_dir() => {
                return Err(BackendError::Cache(format!("replay cache {} does not exist", dir.display())))
            }
            CacheMode::Replay => {}
        }
        Ok(CachedBackend { inner, dir, mode, hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// Requests forwarded to the inner backend.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    fn key(request: &Value) -> String {
        hex::encode(Sha256::digest(request.to_string().as_bytes()))
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn load(&self, key: &str, request: &Value) -> Option<Value> {
        let path = self.path(key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.request == *request => Some(entry.response),
            Ok(_) => {
                log::warn!("cache entry {} does not match its request; ignoring", path.display());
                None
            }
            Err(e) => {
                log::warn!("corrupt cache entry {}: {e}; ignoring", path.display());
                None
            }
        }
    }

    fn store(&self, key: &str, request: Value, response: Value) -> Result<(), BackendError> {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let entry = CacheEntry { request, response, model_id: self.inner.info().model_id, timestamp };
        let body = serde_json::to_vec_pretty(&entry).map_err(|e| BackendError::Cache(e.to_string()))?;
        let cache_err = |e: std::io::Error| BackendError::Cache(e.to_string());
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(cache_err)?;
        tmp.write_all(&body).map_err(cache_err)?;
        tmp.persist(self.path(key)).map_err(|e| cache_err(e.error))?;
        Ok(())
    }

    fn cached<T, F>(&self, request: CacheRequest, compute: F) -> Result<T, BackendError>
    where
        T: Serialize + for<'de> Deserialize<'de>,
        F: FnOnce() -> Result<T, BackendError>,
    {
        let request = serde_json::to_value(&request).map_err(|e| BackendError::Cache(e.to_string()))?;
        let key = Self::key(&request);
        if let Some(response) = self.load(&key, &request) {
            match serde_json::from_value(response) {
                Ok(v) => {
                    self.hits.fetch_add(1, Ordering::SeqCst);
                    return Ok(v);
                }
                Err(e) => log::warn!("cache entry {key} has an unexpected response shape: {e}"),
            }
        }
        if self.mode == CacheMode::Replay {
            return Err(BackendError::FixtureIncomplete { key });
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let value = compute()?;
        let response = serde_json::to_value(&value).map_err(|e| BackendError::Cache(e.to_string()))?;
        self.store(&key, request, response)?;
        Ok(value)
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }

    fn count_tokens(&self, text: &str) -> usize {
        self.inner.count_tokens(text)
    }

    fn score_continuations(&self, context: &str, continuations: &[String]) -> Result<Vec<f64>, BackendError> {
        let request = CacheRequest {
            model_id: self.inner.info().model_id,
            op: "score_continuations".into(),
            context: context.into(),
            continuations: Some(continuations.to_vec()),
            params: None,
        };
        self.cached(request, || self.inner.score_continuations(context, continuations))
    }

    fn generate(&self, context: &str, params: &GenParams) -> Result<String, BackendError> {
        let request = CacheRequest {
            model_id: self.inner.info().model_id,
            op: "generate".into(),
            context: context.into(),
            continuations: None,
            params: Some(params.clone()),
        };
        self.cached(request, || self.inner.generate(context, params))
    }
}

/// Stands in for a live backend during replay. It reports the model identity
/// and token estimate but refuses to serve requests.
pub struct OfflineBackend {
    pub info: BackendInfo,
    pub chars_per_token: f64,
}

impl Backend for OfflineBackend {
    fn info(&self) -> BackendInfo {
        self.info.clone()
    }

    fn count_tokens(&self, text: &str) -> usize {
        (text.chars().count() as f64 / self.chars_per_token).ceil() as usize
    }

    fn score_continuations(&self, _: &str, _: &[String]) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::FixtureIncomplete { key: "offline backend".into() })
    }

    fn generate(&self, _: &str, _: &GenParams) -> Result<String, BackendError> {
        Err(BackendError::FixtureIncomplete { key: "offline backend".into() })
    }
}
