//! Text embeddings and the treatment–outcome feature vector.
//!
//! A feature vector for an experiment is `[t ‖ o ‖ t ⊙ o]` where `t` and `o`
//! are the embeddings of its treatment and outcome descriptions. Embedders
//! are pluggable through [`Embedder`]; three are provided:
//!
//! * [`StubEmbedder`]: deterministic pseudo-random unit vectors, no network.
//! * [`VectorFileEmbedder`]: precomputed vectors read from a vector file.
//! * [`RemoteEmbedder`]: an HTTP embedding service with batching, retry and
//!   a cache keyed by `(model, text)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::archive::Archive;

/// Default model identifier for the remote embedder.
pub const DEFAULT_EMBED_MODEL: &str = "sentence-transformers/all-mpnet-base-v2";
pub const DEFAULT_EMBED_DIMENSION: usize = 768;
pub const DEFAULT_EMBED_ENDPOINT: &str = "http://127.0.0.1:8080/v1/embeddings";
pub const EMBED_KEY_ENV: &str = "EXATLAS_EMBED_KEY";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding transport failure: {message}")]
    Transport { message: String, retryable: bool },
    #[error("no stored vector for {key:?}")]
    MissingVector { key: String },
    #[error("cannot embed empty text ({key:?})")]
    EmptyText { key: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding for {key:?} contains non-finite values")]
    NonFinite { key: String },
    #[error("vector file {path}, line {line}: {message}")]
    VectorFile {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("experiment {id:?}: {source}")]
    ForExperiment {
        id: String,
        #[source]
        source: Box<EmbedError>,
    },
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        match self {
            EmbedError::Transport { retryable, .. } => *retryable,
            EmbedError::ForExperiment { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}

/// An embedding of one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite { key: String::new() });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `[t ‖ o ‖ t ⊙ o]`, length `3d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Wraps raw values, e.g. ones read back from a vector file. The layout
    /// invariant is not checked here; see [`FeatureVector::has_feature_layout`].
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Embedding dimension `d` (a third of the length).
    pub fn embedding_dim(&self) -> usize {
        self.0.len() / 3
    }

    pub fn treatment_part(&self) -> &[f64] {
        let d = self.embedding_dim();
        &self.0[..d]
    }

    pub fn outcome_part(&self) -> &[f64] {
        let d = self.embedding_dim();
        &self.0[d..2 * d]
    }

    pub fn interaction_part(&self) -> &[f64] {
        let d = self.embedding_dim();
        &self.0[2 * d..]
    }

    pub fn has_feature_layout(&self) -> bool {
        self.0.len().is_multiple_of(3)
            && self
                .interaction_part()
                .iter()
                .zip(self.treatment_part().iter().zip(self.outcome_part()))
                .all(|(p, (t, o))| *p == t * o)
    }

    pub fn distance(&self, other: &FeatureVector) -> f64 {
        euclidean(&self.0, &other.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn build_feature(t: &EmbeddingVector, o: &EmbeddingVector) -> Result<FeatureVector, EmbedError> {
    if t.dim() != o.dim() {
        return Err(EmbedError::Dimension {
            expected: t.dim(),
            got: o.dim(),
        });
    }
    let mut values = Vec::with_capacity(3 * t.dim());
    values.extend_from_slice(t.as_slice());
    values.extend_from_slice(o.as_slice());
    values.extend(t.as_slice().iter().zip(o.as_slice()).map(|(a, b)| a * b));
    Ok(FeatureVector(values))
}

/// A text to embed plus a stable key naming it (e.g. `exp-3/treatment`).
/// Vector-file lookups use the key; the other embedders use the text.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TextItem {
    pub key: String,
    pub text: String,
}

impl TextItem {
    pub fn new(key: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            text: text.into(),
        }
    }
}

pub trait Embedder: Send + Sync {
    /// Output dimension, fixed for the lifetime of the embedder.
    fn dimension(&self) -> usize;

    fn embed(&self, item: &TextItem) -> Result<EmbeddingVector, EmbedError>;

    fn embed_many(&self, items: &[TextItem]) -> Vec<Result<EmbeddingVector, EmbedError>> {
        items.par_iter().map(|item| self.embed(item)).collect()
    }
}

fn check_text(item: &TextItem) -> Result<(), EmbedError> {
    if item.text.trim().is_empty() {
        return Err(EmbedError::EmptyText {
            key: item.key.clone(),
        });
    }
    Ok(())
}

fn checked_vector(key: &str, values: Vec<f64>, dim: usize) -> Result<EmbeddingVector, EmbedError> {
    if values.len() != dim {
        return Err(EmbedError::Dimension {
            expected: dim,
            got: values.len(),
        });
    }
    EmbeddingVector::new(values).map_err(|_| EmbedError::NonFinite { key: key.to_string() })
}

// ---------------------------------------------------------------------------
// Deterministic stub

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the UTF-8 bytes of `text`.
pub fn fnv1a64(text: &str) -> u64 {
    text.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 step: advances `state` and returns the next output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded pseudo-random unit vectors.
///
/// The generator is fixed so vectors are identical on every platform:
/// the stream state starts at `fnv1a64(text) ^ splitmix64(seed)`; each
/// coordinate is the sum of twelve uniforms `(splitmix64() >> 11) · 2⁻⁵³`
/// minus six, and the vector is divided by its Euclidean norm. Only IEEE
/// add, multiply, divide and square root are involved.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    seed: u64,
    dimension: usize,
}

impl StubEmbedder {
    pub fn new(seed: u64, dimension: usize) -> Self {
        assert!(dimension > 0, "stub dimension must be positive");
        Self { seed, dimension }
    }

    fn vector_for(&self, text: &str) -> Vec<f64> {
        let mut seed_state = self.seed;
        let mut state = fnv1a64(text) ^ splitmix64(&mut seed_state);
        let scale = 1.0 / (1u64 << 53) as f64;
        loop {
            let mut v: Vec<f64> = (0..self.dimension)
                .map(|_| {
                    (0..12)
                        .map(|_| (splitmix64(&mut state) >> 11) as f64 * scale)
                        .sum::<f64>()
                        - 6.0
                })
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
                return v;
            }
        }
    }
}

impl Embedder for StubEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, item: &TextItem) -> Result<EmbeddingVector, EmbedError> {
        check_text(item)?;
        Ok(EmbeddingVector(self.vector_for(&item.text)))
    }
}

// ---------------------------------------------------------------------------
// Vector file

/// One line of a vector file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorRecord {
    pub id: String,
    pub values: Vec<f64>,
}

/// Reads `{id, values}` lines. The dimension is taken from the first record
/// and enforced for the rest.
pub fn read_vector_file(path: impl AsRef<Path>) -> Result<Vec<VectorRecord>, EmbedError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_vector_records(&text).map_err(|(line, message)| EmbedError::VectorFile {
        path: path.to_path_buf(),
        line,
        message,
    })
}

fn parse_vector_records(text: &str) -> Result<Vec<VectorRecord>, (usize, String)> {
    let mut out: Vec<VectorRecord> = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: VectorRecord = serde_json::from_str(raw).map_err(|e| (line, e.to_string()))?;
        if let Some(first) = out.first() {
            if rec.values.len() != first.values.len() {
                return Err((
                    line,
                    format!(
                        "dimension {} differs from first record's {}",
                        rec.values.len(),
                        first.values.len()
                    ),
                ));
            }
        } else if rec.values.is_empty() {
            return Err((line, "empty vector".into()));
        }
        if rec.values.iter().any(|v| !v.is_finite()) {
            return Err((line, format!("non-finite value in {:?}", rec.id)));
        }
        if !ids.insert(rec.id.clone()) {
            return Err((line, format!("duplicate id {:?}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_vector_file<'a, I>(path: impl AsRef<Path>, records: I) -> Result<(), EmbedError>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    let path = path.as_ref();
    let io_err = |source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = String::new();
    for (id, values) in records {
        let rec = VectorRecord {
            id: id.to_string(),
            values: values.to_vec(),
        };
        buf.push_str(&serde_json::to_string(&rec).expect("vector record serializes"));
        buf.push('\n');
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(buf.as_bytes()).map_err(io_err)
}

/// Precomputed embeddings keyed by text key (falling back to the text itself).
#[derive(Debug, Clone)]
pub struct VectorFileEmbedder {
    dimension: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl VectorFileEmbedder {
    pub fn from_records(records: Vec<VectorRecord>) -> Result<Self, EmbedError> {
        let dimension = records.first().map(|r| r.values.len()).unwrap_or(0);
        let mut vectors = HashMap::with_capacity(records.len());
        for rec in records {
            if rec.values.len() != dimension {
                return Err(EmbedError::Dimension {
                    expected: dimension,
                    got: rec.values.len(),
                });
            }
            vectors.insert(rec.id, rec.values);
        }
        Ok(Self { dimension, vectors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        Self::from_records(read_vector_file(path)?)
    }
}

impl Embedder for VectorFileEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, item: &TextItem) -> Result<EmbeddingVector, EmbedError> {
        check_text(item)?;
        self.vectors
            .get(&item.key)
            .or_else(|| self.vectors.get(&item.text))
            .map(|v| EmbeddingVector(v.clone()))
            .ok_or_else(|| EmbedError::MissingVector {
                key: item.key.clone(),
            })
    }
}

// ---------------------------------------------------------------------------
// Remote service

/// Failure reported by an [`EmbeddingTransport`].
#[derive(Debug, Clone)]
pub struct TransportError {
    pub message: String,
    pub retryable: bool,
}

/// Sends one batch of texts to an embedding service.
pub trait EmbeddingTransport: Send + Sync {
    fn embed_batch(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, TransportError>;
}

/// OpenAI-compatible `POST {endpoint}` with `{"model", "input": [...]}`,
/// expecting `{"data": [{"index", "embedding"}]}` back.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingTransport {
    endpoint: String,
    api_key: Option<String>,
    timeout: Duration,
}

impl HttpEmbeddingTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl EmbeddingTransport for HttpEmbeddingTransport {
    fn embed_batch(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({ "model": model, "input": texts });
        let mut resp = req.send_json(&body).map_err(|e| TransportError {
            message: e.to_string(),
            retryable: true,
        })?;
        let status = resp.status().as_u16();
        if status != 200 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(TransportError {
                message: format!("HTTP {status}: {text}"),
                retryable: status == 429 || status >= 500,
            });
        }
        let parsed: EmbeddingsResponse = resp.body_mut().read_json().map_err(|e| TransportError {
            message: format!("bad response body: {e}"),
            retryable: false,
        })?;
        if parsed.data.len() != texts.len() {
            return Err(TransportError {
                message: format!("expected {} embeddings, got {}", texts.len(), parsed.data.len()),
                retryable: false,
            });
        }
        let mut out = vec![Vec::new(); texts.len()];
        for (pos, datum) in parsed.data.into_iter().enumerate() {
            let idx = datum.index.unwrap_or(pos);
            if idx >= out.len() {
                return Err(TransportError {
                    message: format!("embedding index {idx} out of range"),
                    retryable: false,
                });
            }
            out[idx] = datum.embedding;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbedConfig {
    pub endpoint: String,
    pub model: String,
    pub dimension: usize,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub max_retries: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff_ms: u64,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RemoteEmbedConfig {
    fn default() -> Self {
        Self {
            endpoint: DEFAULT_EMBED_ENDPOINT.to_string(),
            model: DEFAULT_EMBED_MODEL.to_string(),
            dimension: DEFAULT_EMBED_DIMENSION,
            batch_size: 64,
            max_in_flight: 4,
            max_retries: 3,
            backoff_ms: 500,
            cache_dir: None,
        }
    }
}

/// Remote embedder with an in-memory cache and optional on-disk cache.
pub struct RemoteEmbedder {
    config: RemoteEmbedConfig,
    transport: Arc<dyn EmbeddingTransport>,
    cache: Mutex<HashMap<String, Vec<f64>>>,
    // Held across miss -> fetch -> insert so one (model, text) is requested once.
    fetch_lock: Mutex<()>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedConfig, transport: Arc<dyn EmbeddingTransport>) -> Self {
        Self {
            config,
            transport,
            cache: Mutex::new(HashMap::new()),
            fetch_lock: Mutex::new(()),
        }
    }

    /// HTTP transport with the API key read from `EXATLAS_EMBED_KEY`.
    pub fn http(config: RemoteEmbedConfig) -> Self {
        let key = std::env::var(EMBED_KEY_ENV).ok().filter(|k| !k.is_empty());
        let transport = HttpEmbeddingTransport::new(config.endpoint.clone(), key);
        Self::new(config, Arc::new(transport))
    }

    fn cache_key(&self, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.config.model.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.config
            .cache_dir
            .as_ref()
            .map(|dir| dir.join(format!("{key}.json")))
    }

    fn lookup(&self, key: &str) -> Option<Vec<f64>> {
        if let Some(v) = self.cache.lock().unwrap().get(key) {
            return Some(v.clone());
        }
        let path = self.cache_path(key)?;
        let text = fs::read_to_string(path).ok()?;
        let values: Vec<f64> = serde_json::from_str(&text).ok()?;
        if values.len() != self.config.dimension {
            return None;
        }
        self.cache.lock().unwrap().insert(key.to_string(), values.clone());
        Some(values)
    }

    fn store(&self, key: String, values: Vec<f64>) {
        if let Some(path) = self.cache_path(&key) {
            let written = path
                .parent()
                .map(fs::create_dir_all)
                .unwrap_or(Ok(()))
                .and_then(|_| fs::write(&path, serde_json::to_string(&values).unwrap()));
            if let Err(e) = written {
                log::warn!("could not write embedding cache {}: {e}", path.display());
            }
        }
        self.cache.lock().unwrap().insert(key, values);
    }

    fn request_with_retry(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut delay = self.config.backoff_ms;
        let mut attempt = 0;
        loop {
            match self.transport.embed_batch(&self.config.model, texts) {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable && attempt < self.config.max_retries => {
                    attempt += 1;
                    log::warn!(
                        "embedding request failed (attempt {attempt}/{}): {}; retrying in {delay}ms",
                        self.config.max_retries,
                        e.message
                    );
                    std::thread::sleep(Duration::from_millis(delay));
                    delay = delay.saturating_mul(2);
                }
                Err(e) => {
                    return Err(EmbedError::Transport {
                        message: e.message,
                        retryable: e.retryable,
                    })
                }
            }
        }
    }

    /// Fetches every uncached text, `batch_size` per request and at most
    /// `max_in_flight` requests at a time.
    fn fill_cache(&self, texts: &[String]) -> Result<(), EmbedError> {
        let _guard = self.fetch_lock.lock().unwrap();
        let mut missing: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        for text in texts {
            let key = self.cache_key(text);
            if seen.insert(key.clone()) && self.lookup(&key).is_none() {
                missing.push(text.clone());
            }
        }
        let batches: Vec<&[String]> = missing.chunks(self.config.batch_size.max(1)).collect();
        for wave in batches.chunks(self.config.max_in_flight.max(1)) {
            let results: Vec<Result<Vec<Vec<f64>>, EmbedError>> = std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|batch| s.spawn(move || self.request_with_retry(batch)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("embed worker panicked")).collect()
            });
            for (batch, result) in wave.iter().zip(results) {
                for (text, values) in batch.iter().zip(result?) {
                    let key = self.cache_key(text);
                    checked_vector(text, values.clone(), self.config.dimension)?;
                    self.store(key, values);
                }
            }
        }
        Ok(())
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn embed(&self, item: &TextItem) -> Result<EmbeddingVector, EmbedError> {
        check_text(item)?;
        let key = self.cache_key(&item.text);
        if let Some(v) = self.lookup(&key) {
            return Ok(EmbeddingVector(v));
        }
        self.fill_cache(std::slice::from_ref(&item.text))?;
        let v = self.lookup(&key).ok_or_else(|| EmbedError::MissingVector {
            key: item.key.clone(),
        })?;
        Ok(EmbeddingVector(v))
    }

    fn embed_many(&self, items: &[TextItem]) -> Vec<Result<EmbeddingVector, EmbedError>> {
        let valid: Vec<String> = items
            .iter()
            .filter(|i| !i.text.trim().is_empty())
            .map(|i| i.text.clone())
            .collect();
        if let Err(e) = self.fill_cache(&valid) {
            let message = e.to_string();
            let retryable = e.is_retryable();
            return items
                .iter()
                .map(|_| {
                    Err(EmbedError::Transport {
                        message: message.clone(),
                        retryable,
                    })
                })
                .collect();
        }
        items.iter().map(|i| self.embed(i)).collect()
    }
}

// ---------------------------------------------------------------------------
// Provider selection

/// Declarative embedder choice, as read from CLI flags or a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbeddingProvider {
    DeterministicStub { seed: u64, dimension: usize },
    VectorFile { path: PathBuf },
    RemoteService(RemoteEmbedConfig),
}

impl EmbeddingProvider {
    pub fn build(&self) -> Result<Box<dyn Embedder>, EmbedError> {
        Ok(match self {
            EmbeddingProvider::DeterministicStub { seed, dimension } => {
                Box::new(StubEmbedder::new(*seed, *dimension))
            }
            EmbeddingProvider::VectorFile { path } => Box::new(VectorFileEmbedder::load(path)?),
            EmbeddingProvider::RemoteService(cfg) => Box::new(RemoteEmbedder::http(cfg.clone())),
        })
    }
}

// ---------------------------------------------------------------------------
// Feature matrix

/// Feature vectors for every experiment of an archive, keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureMatrix {
    pub vectors: BTreeMap<String, FeatureVector>,
    /// Ids whose embeddings used raw texts because enrichment was absent.
    pub raw_fallback: BTreeSet<String>,
}

impl FeatureMatrix {
    pub fn get(&self, id: &str) -> Option<&FeatureVector> {
        self.vectors.get(id)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, x: FeatureVector) {
        self.vectors.insert(id.into(), x);
    }

    pub fn from_records(records: Vec<VectorRecord>) -> Self {
        Self {
            vectors: records
                .into_iter()
                .map(|r| (r.id, FeatureVector(r.values)))
                .collect(),
            raw_fallback: BTreeSet::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        Ok(Self::from_records(read_vector_file(path)?))
    }

    /// Writes one `{id, values}` line per experiment, in `order`.
    pub fn save<'a>(&self, path: impl AsRef<Path>, order: impl IntoIterator<Item = &'a str>) -> Result<(), EmbedError> {
        let rows: Vec<(&str, &[f64])> = order
            .into_iter()
            .filter_map(|id| self.vectors.get(id).map(|x| (id, x.as_slice())))
            .collect();
        write_vector_file(path, rows)
    }
}

pub fn treatment_key(id: &str) -> String {
    format!("{id}/treatment")
}

pub fn outcome_key(id: &str) -> String {
    format!("{id}/outcome")
}

/// Embeds treatment and outcome of every experiment and assembles features.
pub fn feature_matrix(archive: &Archive, embedder: &dyn Embedder) -> Result<FeatureMatrix, EmbedError> {
    let mut items = Vec::with_capacity(2 * archive.len());
    for exp in archive {
        items.push(TextItem::new(treatment_key(&exp.id), exp.embedding_treatment()));
        items.push(TextItem::new(outcome_key(&exp.id), exp.embedding_outcome()));
    }
    let mut embedded = embedder.embed_many(&items).into_iter();
    let mut out = FeatureMatrix::default();
    for exp in archive {
        let attach = |e: EmbedError| EmbedError::ForExperiment {
            id: exp.id.clone(),
            source: Box::new(e),
        };
        let t = embedded.next().expect("one result per item").map_err(attach)?;
        let o = embedded.next().expect("one result per item").map_err(attach)?;
        let x = build_feature(&t, &o).map_err(attach)?;
        if !exp.is_enriched() {
            out.raw_fallback.insert(exp.id.clone());
        }
        out.vectors.insert(exp.id.clone(), x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::Experiment;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn feature_layout_examples() {
        let f = build_feature(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap();
        assert_eq!(f.as_slice(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let f = build_feature(&ev(&[1.0, 1.0]), &ev(&[1.0, 1.0])).unwrap();
        assert_eq!(f.as_slice(), &[1.0; 6]);
        let f = build_feature(&ev(&[2.0, -1.0]), &ev(&[3.0, 4.0])).unwrap();
        assert_eq!(f.as_slice(), &[2.0, -1.0, 3.0, 4.0, 6.0, -4.0]);
        assert!(f.has_feature_layout());
    }

    #[test]
    fn feature_dimension_mismatch() {
        let err = build_feature(&ev(&[1.0, 2.0]), &ev(&[1.0])).unwrap_err();
        assert!(matches!(err, EmbedError::Dimension { expected: 2, got: 1 }));
    }

    proptest! {
        #[test]
        fn interaction_slice_is_elementwise_product(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..32)
        ) {
            let (t, o): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let f = build_feature(&ev(&t), &ev(&o)).unwrap();
            let d = t.len();
            prop_assert_eq!(f.len(), 3 * d);
            for k in 0..d {
                prop_assert_eq!(f.as_slice()[2 * d + k], f.as_slice()[k] * f.as_slice()[d + k]);
            }
        }
    }

    #[test]
    fn stub_is_deterministic_and_unit_norm() {
        let stub = StubEmbedder::new(1, 4);
        let a = stub.embed(&TextItem::new("k", "alpha")).unwrap();
        let b = stub.embed(&TextItem::new("other", "alpha")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 4);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        let c = stub.embed(&TextItem::new("k", "beta")).unwrap();
        assert_ne!(a, c);
        let other_seed = StubEmbedder::new(2, 4).embed(&TextItem::new("k", "alpha")).unwrap();
        assert_ne!(a, other_seed);
    }

    #[test]
    fn stub_values_are_pinned() {
        // Guards the documented hash + generator against accidental change.
        assert_eq!(fnv1a64(""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64("a"), 0xaf63dc4c8601ec8c);
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xe220a8397b1dcdaf);
    }

    #[test]
    fn stub_rejects_empty_text() {
        let stub = StubEmbedder::new(1, 4);
        assert!(matches!(
            stub.embed(&TextItem::new("e1/treatment", "   ")),
            Err(EmbedError::EmptyText { key }) if key == "e1/treatment"
        ));
    }

    #[test]
    fn vector_file_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        write_vector_file(&path, [("a/treatment", &[0.5, -0.25][..]), ("b/treatment", &[1.0, 2.0][..])]).unwrap();
        let emb = VectorFileEmbedder::load(&path).unwrap();
        assert_eq!(emb.dimension(), 2);
        let v = emb.embed(&TextItem::new("a/treatment", "whatever")).unwrap();
        assert_eq!(v.as_slice(), &[0.5, -0.25]);
        let err = emb.embed(&TextItem::new("zz/treatment", "whatever")).unwrap_err();
        assert!(matches!(err, EmbedError::MissingVector { ref key } if key == "zz/treatment"));
        assert!(!err.is_retryable());
    }

    #[test]
    fn vector_file_enforces_first_dimension() {
        let err = parse_vector_records("{\"id\":\"a\",\"values\":[1,2]}\n{\"id\":\"b\",\"values\":[1]}").unwrap_err();
        assert_eq!(err.0, 2);
    }

    struct CountingTransport {
        calls: AtomicUsize,
        texts: AtomicUsize,
        fail_first: AtomicUsize,
        dim: usize,
    }

    impl CountingTransport {
        fn new(dim: usize, fail_first: usize) -> Self {
            Self {
                calls: AtomicUsize::new(0),
                texts: AtomicUsize::new(0),
                fail_first: AtomicUsize::new(fail_first),
                dim,
            }
        }
    }

    impl EmbeddingTransport for CountingTransport {
        fn embed_batch(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self
                .fail_first
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                return Err(TransportError {
                    message: "connection reset".into(),
                    retryable: true,
                });
            }
            self.texts.fetch_add(texts.len(), Ordering::SeqCst);
            let stub = StubEmbedder::new(0, self.dim);
            Ok(texts.iter().map(|t| stub.vector_for(t)).collect())
        }
    }

    fn remote_cfg(dim: usize) -> RemoteEmbedConfig {
        RemoteEmbedConfig {
            dimension: dim,
            batch_size: 3,
            max_in_flight: 2,
            backoff_ms: 0,
            ..RemoteEmbedConfig::default()
        }
    }

    #[test]
    fn remote_cache_hits_on_repeat() {
        let transport = Arc::new(CountingTransport::new(4, 0));
        let emb = RemoteEmbedder::new(remote_cfg(4), transport.clone());
        let a = emb.embed(&TextItem::new("x", "hello")).unwrap();
        let b = emb.embed(&TextItem::new("y", "hello")).unwrap();
        assert_eq!(a, b);
        assert_eq!(transport.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn remote_batches_and_dedups() {
        let transport = Arc::new(CountingTransport::new(4, 0));
        let emb = RemoteEmbedder::new(remote_cfg(4), transport.clone());
        let items: Vec<TextItem> = (0..7)
            .map(|i| TextItem::new(format!("k{i}"), format!("text {}", i % 5)))
            .collect();
        let out = emb.embed_many(&items);
        assert!(out.iter().all(|r| r.is_ok()));
        // 5 distinct texts, batches of 3.
        assert_eq!(transport.texts.load(Ordering::SeqCst), 5);
        assert_eq!(transport.calls.load(Ordering::SeqCst), 2);
        emb.embed_many(&items);
        assert_eq!(transport.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn remote_retries_transient_failures() {
        let transport = Arc::new(CountingTransport::new(4, 2));
        let emb = RemoteEmbedder::new(remote_cfg(4), transport.clone());
        emb.embed(&TextItem::new("x", "hello")).unwrap();
        assert_eq!(transport.calls.load(Ordering::SeqCst), 3);

        let transport = Arc::new(CountingTransport::new(4, 10));
        let emb = RemoteEmbedder::new(remote_cfg(4), transport.clone());
        let err = emb.embed(&TextItem::new("x", "hello")).unwrap_err();
        assert!(err.is_retryable());
        assert_eq!(transport.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn remote_disk_cache_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RemoteEmbedConfig {
            cache_dir: Some(dir.path().to_path_buf()),
            ..remote_cfg(4)
        };
        let t1 = Arc::new(CountingTransport::new(4, 0));
        RemoteEmbedder::new(cfg.clone(), t1.clone())
            .embed(&TextItem::new("x", "warm"))
            .unwrap();
        let t2 = Arc::new(CountingTransport::new(4, 0));
        RemoteEmbedder::new(cfg, t2.clone())
            .embed(&TextItem::new("x", "warm"))
            .unwrap();
        assert_eq!(t1.calls.load(Ordering::SeqCst), 1);
        assert_eq!(t2.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn feature_matrix_flags_raw_fallback() {
        let archive = Archive::new(vec![
            Experiment::new("a", "goal setting", "creativity", 1.0)
                .with_enrichment("specific goal setting", "employee creativity in the organization"),
            Experiment::new("b", "feedback", "performance", -1.0),
        ])
        .unwrap();
        let m = feature_matrix(&archive, &StubEmbedder::new(1, 8)).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.vectors.values().all(|x| x.len() == 24 && x.has_feature_layout()));
        assert_eq!(m.raw_fallback.iter().collect::<Vec<_>>(), ["b"]);
    }

    #[test]
    fn feature_matrix_attaches_experiment_id() {
        let archive = Archive::new(vec![Experiment::new("a", "t", "o", 1.0)]).unwrap();
        let emb = VectorFileEmbedder::from_records(vec![VectorRecord {
            id: "a/treatment".into(),
            values: vec![1.0],
        }])
        .unwrap();
        match feature_matrix(&archive, &emb).unwrap_err() {
            EmbedError::ForExperiment { id, source } => {
                assert_eq!(id, "a");
                assert!(matches!(*source, EmbedError::MissingVector { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
