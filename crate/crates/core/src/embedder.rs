//! Unit-norm text embeddings, a content-addressed cache, and providers.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const NORM_TOLERANCE: f64 = 1e-5;
pub const CACHE_MAGIC: [u8; 4] = *b"FIEC";
pub const CACHE_VERSION: u16 = 1;
pub const TEST_EMBEDDER_MODEL: &str = "test-hash-v1";
pub const DEFAULT_REMOTE_MODEL: &str = "all-mpnet-base-v2";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no texts to embed")]
    EmptyInput,
    #[error("text has no tokens: {0:?}")]
    ZeroVector(String),
    #[error("non-finite component in embedding")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("test embedder needs dim >= 16, got {0}")]
    DimTooSmall(usize),
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("api key environment variable {0} is not set")]
    AuthMissing(String),
    #[error("corrupt cache at byte {offset}: {reason}")]
    CorruptCache { offset: u64, reason: String },
    #[error("cache model mismatch: expected {expected:?}, got {got:?}")]
    ModelMismatch { expected: String, got: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A finite, L2-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Normalizes `values` to unit length. Zero vectors are rejected.
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::ZeroVector(String::new()));
        }
        Ok(EmbeddingVector(values.into_iter().map(|v| (f64::from(v) / norm) as f32).collect()))
    }

    /// Accepts an already-normalized vector as-is, without touching its bits.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbedError::ZeroVector(format!("norm {norm} is not 1")));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    /// Cosine similarity (dot product of unit vectors), accumulated in f64.
    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub type ContentHash = [u8; 32];

pub fn content_hash(text: &str) -> ContentHash {
    Sha256::digest(text.as_bytes()).into()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// MurmurHash3 finalizer; FNV-1a alone leaves the low bits poorly mixed.
fn fmix64(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

/// Deterministic bag-of-tokens embedding: lowercase, split on
/// non-alphanumerics, hash each token (FNV-1a, then fmix64) into one of
/// `dim` buckets, count, normalize.
pub fn test_embed(text: &str, dim: usize) -> Result<EmbeddingVector, EmbedError> {
    if dim < 16 {
        return Err(EmbedError::DimTooSmall(dim));
    }
    let lowered = text.to_lowercase();
    let mut counts = vec![0f32; dim];
    let mut tokens = 0usize;
    for token in lowered.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        counts[(fmix64(fnv1a(token.as_bytes())) % dim as u64) as usize] += 1.0;
        tokens += 1;
    }
    if tokens == 0 {
        return Err(EmbedError::ZeroVector(text.to_string()));
    }
    EmbeddingVector::new(counts)
}

/// Something that turns texts into raw (not necessarily normalized) vectors.
pub trait EmbeddingBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn batch_size(&self) -> usize;
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Offline embedder backed by [`test_embed`].
#[derive(Debug, Clone)]
pub struct TestEmbedder {
    pub dim: usize,
}

impl EmbeddingBackend for TestEmbedder {
    fn model_id(&self) -> &str {
        TEST_EMBEDDER_MODEL
    }

    fn batch_size(&self) -> usize {
        64
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        texts
            .iter()
            .map(|t| test_embed(t, self.dim).map(EmbeddingVector::into_inner))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    pub base_url: String,
    pub model_id: String,
    pub api_key_env: String,
    pub batch_size: usize,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        EmbeddingProviderConfig {
            base_url: "http://localhost:8080".into(),
            model_id: DEFAULT_REMOTE_MODEL.into(),
            api_key_env: "EMBEDDING_API_KEY".into(),
            batch_size: 64,
        }
    }
}

/// OpenAI-compatible `/v1/embeddings` endpoint.
pub struct RemoteEmbedder {
    config: EmbeddingProviderConfig,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(config: EmbeddingProviderConfig) -> Self {
        RemoteEmbedder {
            config,
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl EmbeddingBackend for RemoteEmbedder {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn batch_size(&self) -> usize {
        self.config.batch_size.max(1)
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut request = self
            .client
            .post(format!("{}/v1/embeddings", self.config.base_url.trim_end_matches('/')))
            .json(&serde_json::json!({ "model": self.config.model_id, "input": texts }));
        // Local encoders often run without a key.
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        let status = response.status();
        let body: serde_json::Value = response
            .json()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        if !status.is_success() {
            return Err(EmbedError::ProviderUnavailable(format!("{status}: {body}")));
        }
        let mut rows: Vec<(usize, Vec<f32>)> = body["data"]
            .as_array()
            .ok_or_else(|| EmbedError::ProviderUnavailable("response has no data array".into()))?
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let index = row["index"].as_u64().map_or(i, |v| v as usize);
                let values = row["embedding"]
                    .as_array()
                    .map(|a| a.iter().filter_map(|v| v.as_f64()).map(|v| v as f32).collect())
                    .unwrap_or_default();
                (index, values)
            })
            .collect();
        rows.sort_by_key(|(i, _)| *i);
        if rows.len() != texts.len() {
            return Err(EmbedError::ProviderUnavailable(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                rows.len()
            )));
        }
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

/// Content-addressed store of embeddings for one model and dimension.
#[derive(Debug)]
pub struct EmbeddingCache {
    model_id: String,
    dim: usize,
    entries: RwLock<BTreeMap<ContentHash, EmbeddingVector>>,
}

impl EmbeddingCache {
    pub fn new(model_id: impl Into<String>, dim: usize) -> Self {
        EmbeddingCache {
            model_id: model_id.into(),
            dim,
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, hash: &ContentHash) -> Option<EmbeddingVector> {
        self.entries.read().expect("cache lock").get(hash).cloned()
    }

    pub fn get_text(&self, text: &str) -> Option<EmbeddingVector> {
        self.get(&content_hash(text))
    }

    pub fn insert(&self, hash: ContentHash, vector: EmbeddingVector) -> Result<(), EmbedError> {
        if vector.dim() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                got: vector.dim(),
            });
        }
        self.entries.write().expect("cache lock").insert(hash, vector);
        Ok(())
    }

    /// Snapshot of all entries in hash order.
    pub fn entries(&self) -> Vec<(ContentHash, EmbeddingVector)> {
        self.entries
            .read()
            .expect("cache lock")
            .iter()
            .map(|(k, v)| (*k, v.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries.read().expect("cache lock");
        let mut out = Vec::with_capacity(14 + self.model_id.len() + entries.len() * (32 + 4 * self.dim));
        out.extend_from_slice(&CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.model_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.model_id.as_bytes());
        for (hash, vector) in entries.iter() {
            out.extend_from_slice(hash);
            for v in vector.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        let mut reader = ByteReader { bytes, offset: 0 };
        if reader.take(4, "magic")? != CACHE_MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let version = u16::from_le_bytes(reader.take(2, "version")?.try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(corrupt(4, &format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(reader.take(4, "dim")?.try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(corrupt(6, "zero dimension"));
        }
        let id_len = u32::from_le_bytes(reader.take(4, "model id length")?.try_into().unwrap()) as usize;
        let id_offset = reader.offset;
        let model_id = std::str::from_utf8(reader.take(id_len, "model id")?)
            .map_err(|_| corrupt(id_offset as u64, "model id is not UTF-8"))?
            .to_string();

        let cache = EmbeddingCache::new(model_id, dim);
        {
            let mut entries = cache.entries.write().expect("cache lock");
            while !reader.is_empty() {
                let record_offset = reader.offset as u64;
                let hash: ContentHash = reader.take(32, "record hash")?.try_into().unwrap();
                let values = reader
                    .take(dim * 4, "record values")?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let vector = EmbeddingVector::from_unit(values)
                    .map_err(|e| corrupt(record_offset, &e.to_string()))?;
                entries.insert(hash, vector);
            }
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| EmbedError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let bytes = std::fs::read(path).map_err(|source| EmbedError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the cache belongs to `model_id`.
    pub fn load_for_model(path: &Path, model_id: &str) -> Result<Self, EmbedError> {
        let cache = Self::load(path)?;
        if cache.model_id != model_id {
            return Err(EmbedError::ModelMismatch {
                expected: model_id.to_string(),
                got: cache.model_id,
            });
        }
        Ok(cache)
    }
}

fn corrupt(offset: u64, reason: &str) -> EmbedError {
    EmbedError::CorruptCache {
        offset,
        reason: reason.to_string(),
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EmbedError> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(slice)
            }
            None => Err(corrupt(self.offset as u64, &format!("truncated {what}"))),
        }
    }

    fn is_empty(&self) -> bool {
        self.offset >= self.bytes.len()
    }
}

/// Embeds `texts` in order, serving repeats from `cache` and writing new
/// vectors through to it. Misses are deduplicated, split into
/// provider-sized sub-batches, and run with at most `max_parallel` in flight.
pub fn embed_batch(
    texts: &[String],
    backend: &dyn EmbeddingBackend,
    cache: &EmbeddingCache,
    max_parallel: usize,
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    if backend.model_id() != cache.model_id() {
        return Err(EmbedError::ModelMismatch {
            expected: cache.model_id().to_string(),
            got: backend.model_id().to_string(),
        });
    }
    let hashes: Vec<ContentHash> = texts.iter().map(|t| content_hash(t)).collect();

    let mut seen = HashMap::new();
    let mut misses: Vec<(ContentHash, String)> = Vec::new();
    for (hash, text) in hashes.iter().zip(texts) {
        if seen.insert(*hash, ()).is_none() && cache.get(hash).is_none() {
            misses.push((*hash, text.clone()));
        }
    }

    if !misses.is_empty() {
        let chunks: Vec<&[(ContentHash, String)]> = misses.chunks(backend.batch_size().max(1)).collect();
        let next = AtomicUsize::new(0);
        let first_error: Mutex<Option<EmbedError>> = Mutex::new(None);
        let workers = max_parallel.max(1).min(chunks.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= chunks.len() || first_error.lock().unwrap().is_some() {
                        break;
                    }
                    if let Err(e) = embed_chunk(chunks[i], backend, cache) {
                        first_error.lock().unwrap().get_or_insert(e);
                        break;
                    }
                });
            }
        });
        if let Some(e) = first_error.into_inner().unwrap() {
            return Err(e);
        }
    }

    hashes
        .iter()
        .map(|h| cache.get(h).ok_or_else(|| EmbedError::ProviderUnavailable("missing vector after embedding".into())))
        .collect()
}

fn embed_chunk(
    chunk: &[(ContentHash, String)],
    backend: &dyn EmbeddingBackend,
    cache: &EmbeddingCache,
) -> Result<(), EmbedError> {
    let texts: Vec<String> = chunk.iter().map(|(_, t)| t.clone()).collect();
    let raw = backend.embed_raw(&texts)?;
    if raw.len() != chunk.len() {
        return Err(EmbedError::ProviderUnavailable(format!(
            "asked for {} embeddings, got {}",
            chunk.len(),
            raw.len()
        )));
    }
    for ((hash, text), values) in chunk.iter().zip(raw) {
        if values.len() != cache.dim() {
            return Err(EmbedError::DimensionMismatch {
                expected: cache.dim(),
                got: values.len(),
            });
        }
        let vector = EmbeddingVector::new(values).map_err(|e| match e {
            EmbedError::ZeroVector(_) => EmbedError::ZeroVector(text.clone()),
            other => other,
        })?;
        cache.insert(*hash, vector)?;
    }
    Ok(())
}
