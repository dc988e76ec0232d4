//! Text embedding backends: a remote HTTP service and a deterministic
//! offline stand-in that hashes character trigrams.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIMENSION: usize = 1536;
pub const API_KEY_ENV: &str = "ADAM_EMBED_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("empty input text")]
    EmptyInput,
    #[error("input of {len} characters exceeds the backend limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("keyword weights must be finite, non-negative and not all zero")]
    Weights,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("embedding of {0:?} has zero norm")]
    Degenerate(String),
    #[error("embedding backend failed after {attempts} attempt(s): {message}")]
    Backend { attempts: usize, message: String },
}

/// Unit-length embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    /// Scales `raw` to unit length.
    pub fn normalized(raw: &[f64]) -> Option<Self> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return None;
        }
        Some(Self {
            values: raw.iter().map(|x| (x / norm) as f32).collect(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }
}

pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn max_input_chars(&self) -> usize;
    /// One unit vector per input, in input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;
}

fn check_input(backend: &dyn EmbeddingBackend, text: &str) -> Result<(), EmbeddingError> {
    if text.is_empty() {
        return Err(EmbeddingError::EmptyInput);
    }
    let len = text.chars().count();
    if len > backend.max_input_chars() {
        return Err(EmbeddingError::TooLong {
            len,
            max: backend.max_input_chars(),
        });
    }
    Ok(())
}

pub fn embed_text(
    backend: &dyn EmbeddingBackend,
    text: &str,
) -> Result<EmbeddingVector, EmbeddingError> {
    check_input(backend, text)?;
    let mut v = backend.embed_batch(&[text])?;
    v.pop().ok_or_else(|| EmbeddingError::Backend {
        attempts: 1,
        message: "empty response".into(),
    })
}

/// Embeds many texts in batches of `batch_size`, batches running in parallel.
pub fn embed_all(
    backend: &dyn EmbeddingBackend,
    texts: &[&str],
    batch_size: usize,
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    for t in texts {
        check_input(backend, t)?;
    }
    let batches: Vec<Vec<EmbeddingVector>> = texts
        .par_chunks(batch_size.max(1))
        .map(|b| backend.embed_batch(b))
        .collect::<Result<_, _>>()?;
    Ok(batches.into_iter().flatten().collect())
}

/// Normalized weighted sum of keyword embeddings.
pub fn embed_keywords(
    backend: &dyn EmbeddingBackend,
    keywords: &[(String, f64)],
) -> Result<EmbeddingVector, EmbeddingError> {
    if keywords.is_empty()
        || keywords.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0))
        || keywords.iter().all(|(_, w)| *w == 0.0)
    {
        return Err(EmbeddingError::Weights);
    }
    let texts: Vec<&str> = keywords.iter().map(|(k, _)| k.as_str()).collect();
    for t in &texts {
        check_input(backend, t)?;
    }
    let vectors = backend.embed_batch(&texts)?;
    let mut sum = vec![0.0f64; backend.dimension()];
    for (v, (_, w)) in vectors.iter().zip(keywords) {
        for (s, &x) in sum.iter_mut().zip(&v.values) {
            *s += w * x as f64;
        }
    }
    EmbeddingVector::normalized(&sum).ok_or_else(|| EmbeddingError::Degenerate(texts.join(", ")))
}

/// FNV-1a, 64 bit.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Feature hashing of character trigrams. Texts shorter than three
/// characters hash as a single gram.
#[derive(Debug, Clone)]
pub struct HashingBackend {
    pub dimension: usize,
    pub max_input_chars: usize,
}

impl HashingBackend {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            max_input_chars: usize::MAX,
        }
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let chars: Vec<char> = text.chars().collect();
        let mut acc = vec![0.0f64; self.dimension];
        let mut buf = String::new();
        let mut add = |gram: &[char]| {
            buf.clear();
            buf.extend(gram);
            let h = fnv1a(buf.as_bytes());
            let idx = ((h >> 1) % self.dimension as u64) as usize;
            acc[idx] += if h & 1 == 0 { 1.0 } else { -1.0 };
        };
        if chars.len() < 3 {
            add(&chars);
        } else {
            chars.windows(3).for_each(&mut add);
        }
        EmbeddingVector::normalized(&acc)
            .ok_or_else(|| EmbeddingError::Degenerate(text.chars().take(40).collect()))
    }
}

impl Default for HashingBackend {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl EmbeddingBackend for HashingBackend {
    fn name(&self) -> &str {
        "hashing-trigram"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn max_input_chars(&self) -> usize {
        self.max_input_chars
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub dimension: usize,
    pub max_input_chars: usize,
    pub max_attempts: usize,
    pub base_delay_ms: u64,
    pub backoff_factor: u32,
    pub max_concurrent_requests: usize,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/embeddings".into(),
            model: "text-embedding-ada-002".into(),
            dimension: DEFAULT_DIMENSION,
            max_input_chars: 8000,
            max_attempts: 5,
            base_delay_ms: 1000,
            backoff_factor: 2,
            max_concurrent_requests: 4,
            timeout_secs: 60,
        }
    }
}

impl RemoteConfig {
    /// Delay before retry number `attempt` (1-based).
    pub fn delay(&self, attempt: usize) -> Duration {
        let factor = (self.backoff_factor as u64).saturating_pow(attempt.saturating_sub(1) as u32);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor))
    }
}

/// Counting semaphore.
#[derive(Debug)]
pub(crate) struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().expect("gate lock");
            while *free == 0 {
                free = self.cv.wait(free).expect("gate lock");
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().expect("gate lock") += 1;
        self.cv.notify_one();
        out
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

enum Failure {
    Retry(String),
    Fatal(String),
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    gate: Gate,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, api_key: Option<String>) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| EmbeddingError::Backend {
                attempts: 0,
                message: e.to_string(),
            })?;
        let gate = Gate::new(config.max_concurrent_requests);
        Ok(Self {
            config,
            api_key,
            client,
            gate,
        })
    }

    /// Reads the credential from `ADAM_EMBED_API_KEY`.
    pub fn from_env(config: RemoteConfig) -> Result<Self, EmbeddingError> {
        Self::new(config, std::env::var(API_KEY_ENV).ok())
    }

    fn attempt(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, Failure> {
        let mut req = self.client.post(&self.config.endpoint).json(&EmbedRequest {
            model: &self.config.model,
            input: texts,
        });
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| Failure::Retry(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(format!("HTTP {status}")));
        }
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| Failure::Fatal(format!("bad response body: {e}")))?;
        if body.data.len() != texts.len() {
            return Err(Failure::Fatal(format!(
                "{} vectors for {} inputs",
                body.data.len(),
                texts.len()
            )));
        }
        let mut data = body.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        data.into_iter()
            .map(|d| {
                if d.embedding.len() != self.config.dimension {
                    return Err(Failure::Fatal(format!(
                        "dimension {} != {}",
                        d.embedding.len(),
                        self.config.dimension
                    )));
                }
                EmbeddingVector::normalized(&d.embedding)
                    .ok_or_else(|| Failure::Fatal("zero vector".into()))
            })
            .collect()
    }
}

impl EmbeddingBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn max_input_chars(&self) -> usize {
        self.config.max_input_chars
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let max = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.gate.run(|| self.attempt(texts)) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(m)) => {
                    return Err(EmbeddingError::Backend {
                        attempts: attempt,
                        message: m,
                    })
                }
                Err(Failure::Retry(m)) => {
                    log::warn!("embedding request attempt {attempt}/{max} failed: {m}");
                    last = m;
                    if attempt < max {
                        std::thread::sleep(self.config.delay(attempt));
                    }
                }
            }
        }
        Err(EmbeddingError::Backend {
            attempts: max,
            message: last,
        })
    }
}
