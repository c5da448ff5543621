//! Text embedders producing L2-normalized vectors.
//!
//! The local embedder hashes character 3-grams into `dim` buckets. Each
//! 3-gram (three consecutive Unicode scalar values, UTF-8 encoded) is hashed
//! with 64-bit FNV-1a: the state starts at the offset basis
//! `0xcbf29ce484222325`, absorbs the seed as 8 little-endian bytes and then
//! the n-gram bytes, multiplying by the prime `0x100000001b3` after each
//! XOR. The bucket is `hash % dim`. Bucket counts are L2-normalized. Texts
//! shorter than three characters are treated as a single gram.
//!
//! The remote embedder calls an OpenAI-compatible `/embeddings` endpoint and
//! normalizes whatever comes back.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::transport::{self, RetryPolicy, TransportError};

pub const DEFAULT_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("batch element {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error("embedding has zero norm or non-finite components")]
    Degenerate,
    #[error("embedder configuration: {0}")]
    Config(String),
    #[error("malformed embeddings response: {0}")]
    BadResponse(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// A unit-length embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Normalizes `values` to unit length.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::Degenerate);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::Degenerate);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { values })
    }

    /// Wraps values that are already normalized (e.g. read back from disk).
    pub fn from_unit(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity, which for unit vectors is the dot product.
    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    #[default]
    LocalHash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub seed: u64,
    pub model_name: Option<String>,
    pub base_url: Option<String>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::LocalHash,
            dim: DEFAULT_DIM,
            seed: 0,
            model_name: None,
            base_url: None,
        }
    }
}

impl EmbedderConfig {
    pub fn local(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        match self.kind {
            EmbedderKind::LocalHash if self.dim == 0 => {
                Err(EmbedError::Config("dim must be positive".into()))
            }
            EmbedderKind::Remote if self.model_name.as_deref().unwrap_or("").is_empty() => {
                Err(EmbedError::Config("remote embedder needs model_name".into()))
            }
            EmbedderKind::Remote if self.base_url.as_deref().unwrap_or("").is_empty() => {
                Err(EmbedError::Config("remote embedder needs base_url".into()))
            }
            _ => Ok(()),
        }
    }

    /// Identifies the vector space; stores refuse vectors from a different one.
    pub fn fingerprint(&self) -> String {
        match self.kind {
            EmbedderKind::LocalHash => {
                format!("local-hash/fnv1a64/3gram/dim={}/seed={}", self.dim, self.seed)
            }
            EmbedderKind::Remote => {
                format!("remote/{}", self.model_name.as_deref().unwrap_or_default())
            }
        }
    }
}

pub fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    seed.to_le_bytes()
        .iter()
        .chain(bytes)
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Hashed character 3-gram embedding.
pub fn embed_local(text: &str, dim: usize, seed: u64) -> Result<Embedding, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    if dim == 0 {
        return Err(EmbedError::Config("dim must be positive".into()));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut counts = vec![0.0f64; dim];
    let mut buf = String::with_capacity(12);
    let mut add = |gram: &[char]| {
        buf.clear();
        buf.extend(gram);
        let bucket = (fnv1a64(seed, buf.as_bytes()) % dim as u64) as usize;
        counts[bucket] += 1.0;
    };
    if chars.len() < 3 {
        add(&chars);
    } else {
        chars.windows(3).for_each(add);
    }
    Embedding::normalized(counts)
}

/// Local or remote embedder behind one interface.
#[derive(Debug, Clone)]
pub struct Embedder {
    config: EmbedderConfig,
    client: Option<reqwest::Client>,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        let (client, api_key) = match config.kind {
            EmbedderKind::LocalHash => (None, None),
            EmbedderKind::Remote => (Some(reqwest::Client::new()), transport::api_key_from_env()),
        };
        Ok(Self {
            config,
            client,
            api_key,
            retry: RetryPolicy::default(),
        })
    }

    pub fn local(dim: usize, seed: u64) -> Self {
        Self::new(EmbedderConfig::local(dim, seed)).expect("valid local embedder")
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub async fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        match self.config.kind {
            EmbedderKind::LocalHash => embed_local(text, self.config.dim, self.config.seed),
            EmbedderKind::Remote => {
                if text.trim().is_empty() {
                    return Err(EmbedError::EmptyText);
                }
                let mut out = self.remote(&[text]).await?;
                out.pop()
                    .ok_or_else(|| EmbedError::BadResponse("no vectors returned".into()))
            }
        }
    }

    /// Embeds every text, preserving order. The remote embedder sends one
    /// request for the whole batch.
    pub async fn embed_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Embedding>, EmbedError> {
        for (index, text) in texts.iter().enumerate() {
            if text.as_ref().trim().is_empty() {
                return Err(EmbedError::Batch {
                    index,
                    source: Box::new(EmbedError::EmptyText),
                });
            }
        }
        match self.config.kind {
            EmbedderKind::LocalHash => texts
                .iter()
                .enumerate()
                .map(|(index, t)| {
                    embed_local(t.as_ref(), self.config.dim, self.config.seed).map_err(|e| {
                        EmbedError::Batch {
                            index,
                            source: Box::new(e),
                        }
                    })
                })
                .collect(),
            EmbedderKind::Remote if texts.is_empty() => Ok(Vec::new()),
            EmbedderKind::Remote => {
                let refs: Vec<&str> = texts.iter().map(|t| t.as_ref()).collect();
                self.remote(&refs).await
            }
        }
    }

    async fn remote(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
        let client = self
            .client
            .as_ref()
            .ok_or_else(|| EmbedError::Config("remote client missing".into()))?;
        let base = self.config.base_url.as_deref().unwrap_or_default();
        let url = format!("{}/embeddings", base.trim_end_matches('/'));
        let body = json!({
            "model": self.config.model_name,
            "input": texts,
        });
        let response = transport::post_json(client, &url, self.api_key.as_deref(), &body, self.retry).await?;
        parse_embeddings_response(&response, texts.len())
    }
}

fn parse_embeddings_response(response: &Value, expected: usize) -> Result<Vec<Embedding>, EmbedError> {
    let data = response
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| EmbedError::BadResponse("missing data array".into()))?;
    if data.len() != expected {
        return Err(EmbedError::BadResponse(format!(
            "expected {expected} vectors, got {}",
            data.len()
        )));
    }
    let mut slots: Vec<Option<Embedding>> = vec![None; expected];
    for (pos, item) in data.iter().enumerate() {
        let index = item
            .get("index")
            .and_then(Value::as_u64)
            .map(|i| i as usize)
            .unwrap_or(pos);
        let values: Vec<f64> = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::BadResponse(format!("item {pos} has no embedding")))?
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| EmbedError::BadResponse("non-numeric component".into()))
            })
            .collect::<Result<_, _>>()?;
        let slot = slots
            .get_mut(index)
            .ok_or_else(|| EmbedError::BadResponse(format!("index {index} out of range")))?;
        *slot = Some(Embedding::normalized(values).map_err(|source| EmbedError::Batch {
            index,
            source: Box::new(source),
        })?);
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| EmbedError::BadResponse(format!("missing vector {i}"))))
        .collect()
}
