//! Text embeddings behind a provider trait, with a content-addressed cache.
//!
//! Two providers ship: an OpenAI-compatible remote embeddings endpoint and a
//! deterministic feature-hashing encoder that needs no network. Every vector
//! leaving [`Embedder`] is L2-normalized.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::FeatureError;
use crate::net::{self, Backoff};
use crate::text::tokenize;

pub const EMBED_TOKEN_ENV: &str = "DELUSIM_EMBED_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Remote,
    Hashing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingProviderConfig {
    pub kind: ProviderKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

fn default_dimension() -> usize {
    384
}
fn default_timeout_secs() -> f64 {
    30.0
}
fn default_max_batch() -> usize {
    64
}
fn default_max_retries() -> u32 {
    3
}

impl EmbeddingProviderConfig {
    pub fn hashing(dimension: usize) -> Self {
        EmbeddingProviderConfig {
            kind: ProviderKind::Hashing,
            endpoint_url: None,
            model_name: None,
            dimension,
            cache_path: None,
            request_timeout_secs: default_timeout_secs(),
            max_batch: default_max_batch(),
            max_retries: default_max_retries(),
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.dimension == 0 {
            return Err(FeatureError::Config("embedding dimension must be positive".into()));
        }
        if self.max_batch == 0 {
            return Err(FeatureError::Config("max_batch must be positive".into()));
        }
        if self.kind == ProviderKind::Remote && self.endpoint_url.as_deref().unwrap_or("").is_empty() {
            return Err(FeatureError::Config("remote embedding provider needs endpoint_url".into()));
        }
        Ok(())
    }
}

/// A source of raw (not yet normalized) embeddings.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identity: kind, model and dimension. Feeds cache keys and fingerprints.
    fn identity(&self) -> String;
    fn dimension(&self) -> usize;
    fn max_batch(&self) -> usize {
        usize::MAX
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, FeatureError>;
}

/// Signed feature hashing of token unigrams and bigrams.
#[derive(Debug, Clone)]
pub struct HashingProvider {
    dimension: usize,
}

impl HashingProvider {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0);
        HashingProvider { dimension }
    }

    fn bucket(&self, feature: &str) -> (usize, f64) {
        let digest = Sha256::digest(feature.as_bytes());
        let mut idx = [0u8; 8];
        idx.copy_from_slice(&digest[..8]);
        let bucket = (u64::from_le_bytes(idx) % self.dimension as u64) as usize;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }

    pub fn raw(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        let mut v = vec![0.0; self.dimension];
        for t in &tokens {
            let (b, s) = self.bucket(t);
            v[b] += s;
        }
        for pair in tokens.windows(2) {
            let (b, s) = self.bucket(&format!("{} {}", pair[0], pair[1]));
            v[b] += s;
        }
        v
    }
}

impl EmbeddingProvider for HashingProvider {
    fn identity(&self) -> String {
        format!("hashing/ngram2/{}", self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, FeatureError> {
        Ok(texts.iter().map(|t| self.raw(t)).collect())
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

/// OpenAI-compatible `/embeddings` client.
pub struct RemoteProvider {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    token: Option<String>,
    dimension: usize,
    max_batch: usize,
    backoff: Backoff,
}

impl RemoteProvider {
    pub fn new(cfg: &EmbeddingProviderConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let client = net::http_client(Duration::from_secs_f64(cfg.request_timeout_secs))
            .map_err(|e| FeatureError::Transport { batch: 0, source: e })?;
        Ok(RemoteProvider {
            client,
            url: cfg.endpoint_url.clone().unwrap_or_default(),
            model: cfg.model_name.clone().unwrap_or_default(),
            token: net::token_from_env(EMBED_TOKEN_ENV),
            dimension: cfg.dimension,
            max_batch: cfg.max_batch,
            backoff: Backoff { max_retries: cfg.max_retries, ..Backoff::default() },
        })
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn identity(&self) -> String {
        format!("remote/{}/{}", self.model, self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn max_batch(&self) -> usize {
        self.max_batch
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, FeatureError> {
        let body = EmbeddingRequest { model: &self.model, input: texts };
        let resp: EmbeddingResponse = net::with_retries(&self.backoff, || {
            net::post_json(&self.client, &self.url, self.token.as_deref(), &body)
        })
        .map_err(|e| FeatureError::Transport { batch: 0, source: e })?;
        if resp.data.len() != texts.len() {
            return Err(FeatureError::Protocol(format!(
                "expected {} embeddings, server returned {}",
                texts.len(),
                resp.data.len()
            )));
        }
        let mut out = vec![Vec::new(); texts.len()];
        for d in resp.data {
            if d.index >= texts.len() || !out[d.index].is_empty() {
                return Err(FeatureError::Protocol(format!("bad or repeated embedding index {}", d.index)));
            }
            out[d.index] = d.embedding;
        }
        Ok(out)
    }
}

pub fn provider_from_config(cfg: &EmbeddingProviderConfig) -> Result<Box<dyn EmbeddingProvider>, FeatureError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        ProviderKind::Hashing => Box::new(HashingProvider::new(cfg.dimension)),
        ProviderKind::Remote => Box::new(RemoteProvider::new(cfg)?),
    })
}

pub fn l2_normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

type CacheKey = [u8; 32];

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    embedding: Vec<f64>,
}

/// Provider plus cache. Cheap to share behind an `Arc`; concurrent readers,
/// writers serialized on the cache lock.
pub struct Embedder {
    provider: Box<dyn EmbeddingProvider>,
    cache: RwLock<HashMap<CacheKey, Arc<Vec<f64>>>>,
    cache_file: Option<Mutex<File>>,
    zero_vectors: AtomicUsize,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder").field("provider", &self.provider.identity()).finish()
    }
}

impl Embedder {
    pub fn new(provider: Box<dyn EmbeddingProvider>) -> Self {
        Embedder {
            provider,
            cache: RwLock::new(HashMap::new()),
            cache_file: None,
            zero_vectors: AtomicUsize::new(0),
        }
    }

    pub fn from_config(cfg: &EmbeddingProviderConfig) -> Result<Self, FeatureError> {
        let embedder = Self::new(provider_from_config(cfg)?);
        match &cfg.cache_path {
            Some(path) => embedder.with_cache_file(path),
            None => Ok(embedder),
        }
    }

    /// Load any existing entries from `path` and append new ones to it.
    pub fn with_cache_file(mut self, path: &Path) -> Result<Self, FeatureError> {
        let io = |e: std::io::Error| FeatureError::Cache(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            let mut cache = self.cache.write().expect("cache poisoned");
            for line in reader.lines() {
                let line = line.map_err(io)?;
                let Ok(entry) = serde_json::from_str::<CacheLine>(&line) else { continue };
                let mut key = [0u8; 32];
                if hex::decode_to_slice(&entry.key, &mut key).is_ok()
                    && entry.embedding.len() == self.provider.dimension()
                {
                    cache.insert(key, Arc::new(entry.embedding));
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        self.cache_file = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn dimension(&self) -> usize {
        self.provider.dimension()
    }

    pub fn identity(&self) -> String {
        self.provider.identity()
    }

    /// Hash of the provider identity; stored in trained models and checked at predict time.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.provider.identity().as_bytes()))
    }

    /// Number of all-zero (unnormalizable) vectors produced so far.
    pub fn zero_vector_count(&self) -> usize {
        self.zero_vectors.load(Ordering::Relaxed)
    }

    fn key(&self, text: &str) -> CacheKey {
        let mut h = Sha256::new();
        h.update(self.provider.identity().as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        h.finalize().into()
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f64>, FeatureError> {
        Ok(self.embed(&[text])?.pop().expect("one vector per text"))
    }

    /// One unit vector per text, in order.
    pub fn embed<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Vec<f64>>, FeatureError> {
        let keys: Vec<CacheKey> = texts.iter().map(|t| self.key(t.as_ref())).collect();
        let mut missing: Vec<usize> = Vec::new();
        {
            let cache = self.cache.read().expect("cache poisoned");
            let mut queued = std::collections::HashSet::new();
            for (i, k) in keys.iter().enumerate() {
                if !cache.contains_key(k) && queued.insert(*k) {
                    missing.push(i);
                }
            }
        }

        let batch_size = self.provider.max_batch().max(1);
        for (batch_no, chunk) in missing.chunks(batch_size).enumerate() {
            let batch: Vec<&str> = chunk.iter().map(|&i| texts[i].as_ref()).collect();
            let raw = self.provider.embed_batch(&batch).map_err(|e| match e {
                FeatureError::Transport { source, .. } => FeatureError::Transport { batch: batch_no, source },
                other => other,
            })?;
            if raw.len() != batch.len() {
                return Err(FeatureError::Protocol(format!(
                    "provider returned {} vectors for {} texts",
                    raw.len(),
                    batch.len()
                )));
            }
            let mut fresh = Vec::with_capacity(raw.len());
            for (&i, mut v) in chunk.iter().zip(raw) {
                if v.len() != self.dimension() {
                    return Err(FeatureError::DimensionMismatch { expected: self.dimension(), got: v.len() });
                }
                if !l2_normalize(&mut v) {
                    self.zero_vectors.fetch_add(1, Ordering::Relaxed);
                    log::warn!("zero embedding for text #{i} (empty after tokenization?)");
                    v.iter_mut().for_each(|x| *x = 0.0);
                }
                fresh.push((keys[i], Arc::new(v)));
            }
            self.store(fresh)?;
        }

        let cache = self.cache.read().expect("cache poisoned");
        Ok(keys.iter().map(|k| cache[k].as_ref().clone()).collect())
    }

    fn store(&self, entries: Vec<(CacheKey, Arc<Vec<f64>>)>) -> Result<(), FeatureError> {
        let mut cache = self.cache.write().expect("cache poisoned");
        if let Some(file) = &self.cache_file {
            let mut file = file.lock().expect("cache file poisoned");
            for (k, v) in &entries {
                if cache.contains_key(k) {
                    continue;
                }
                let line = serde_json::to_string(&CacheLine { key: hex::encode(k), embedding: v.to_vec() })
                    .expect("vectors serialize");
                writeln!(file, "{line}").map_err(|e| FeatureError::Cache(e.to_string()))?;
            }
        }
        for (k, v) in entries {
            cache.entry(k).or_insert(v);
        }
        Ok(())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Counting {
        inner: HashingProvider,
        calls: Arc<AtomicUsize>,
        batch: usize,
    }

    impl EmbeddingProvider for Counting {
        fn identity(&self) -> String {
            self.inner.identity()
        }
        fn dimension(&self) -> usize {
            self.inner.dimension()
        }
        fn max_batch(&self) -> usize {
            self.batch
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, FeatureError> {
            assert!(texts.len() <= self.batch);
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.embed_batch(texts)
        }
    }

    fn counting(batch: usize) -> (Embedder, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let p = Counting { inner: HashingProvider::new(384), calls: Arc::clone(&calls), batch };
        (Embedder::new(Box::new(p)), calls)
    }

    #[test]
    fn hashing_is_deterministic_and_unit_norm() {
        let e = Embedder::from_config(&EmbeddingProviderConfig::hashing(384)).unwrap();
        let a = e.embed(&["they are watching me", "they are watching me"]).unwrap();
        assert_eq!(a[0], a[1]);
        let norm: f64 = a[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn disjoint_vocabularies_are_nearly_orthogonal() {
        let e = Embedder::from_config(&EmbeddingProviderConfig::hashing(384)).unwrap();
        let v = e
            .embed(&[
                "satellites broadcast hidden signals through the walls at night",
                "my sourdough starter finally rose after feeding it rye flour",
            ])
            .unwrap();
        assert!(cosine(&v[0], &v[1]) < 0.2, "{}", cosine(&v[0], &v[1]));
    }

    #[test]
    fn single_character_edit_changes_a_bucket() {
        let p = HashingProvider::new(384);
        for (a, b) in [("signal", "signals"), ("the cat sat", "the cat sad"), ("abc", "abd")] {
            assert_ne!(p.raw(a), p.raw(b));
        }
    }

    #[test]
    fn cache_hit_needs_no_requests() {
        let (e, calls) = counting(2);
        let texts = ["a b", "c d", "e f", "a b", "g"];
        let first = e.embed(&texts).unwrap();
        // 4 distinct texts in batches of 2
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        let second = e.embed(&texts).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(first, second);
    }

    #[test]
    fn cache_file_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache/emb.jsonl");
        let (e, _) = counting(8);
        let e = e.with_cache_file(&path).unwrap();
        let first = e.embed(&["persisted text", "another one"]).unwrap();
        drop(e);
        let (e, calls) = counting(8);
        let e = e.with_cache_file(&path).unwrap();
        let second = e.embed(&["persisted text", "another one"]).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 0);
        // bit-identical floats through the JSON cache
        assert_eq!(
            first.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>(),
            second.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn empty_text_yields_flagged_zero_vector() {
        let e = Embedder::from_config(&EmbeddingProviderConfig::hashing(16)).unwrap();
        let v = e.embed_one("  ").unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
        assert_eq!(e.zero_vector_count(), 1);
    }

    #[test]
    fn wrong_dimension_is_fatal() {
        struct Bad;
        impl EmbeddingProvider for Bad {
            fn identity(&self) -> String {
                "bad".into()
            }
            fn dimension(&self) -> usize {
                4
            }
            fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, FeatureError> {
                Ok(texts.iter().map(|_| vec![1.0; 3]).collect())
            }
        }
        let e = Embedder::new(Box::new(Bad));
        assert!(matches!(e.embed(&["x"]), Err(FeatureError::DimensionMismatch { expected: 4, got: 3 })));
    }

    #[test]
    fn remote_config_requires_endpoint() {
        let mut cfg = EmbeddingProviderConfig::hashing(8);
        cfg.kind = ProviderKind::Remote;
        assert!(cfg.validate().is_err());
        cfg.endpoint_url = Some("http://localhost:1/embeddings".into());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn fingerprint_tracks_identity() {
        let a = Embedder::new(Box::new(HashingProvider::new(384)));
        let b = Embedder::new(Box::new(HashingProvider::new(384)));
        let c = Embedder::new(Box::new(HashingProvider::new(128)));
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
