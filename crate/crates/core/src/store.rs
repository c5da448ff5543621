//! Exact-scan vector store with cosine top-k search, context reranking and
//! JSON-lines persistence.
//!
//! Every search scores all entries; there is no approximate index. Ties are
//! broken by insertion order so results are fully deterministic.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedding;
use crate::ingest::DocumentChunk;

pub const FORMAT_VERSION: u32 = 1;
pub const FINGERPRINT_KEY: &str = "embedder_fingerprint";

/// Candidates fetched per requested result before reranking.
pub const OVERFETCH_FACTOR: usize = 4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("empty store")]
    Empty,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("dimension mismatch: store has {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(String),
    #[error("{chunks} chunks but {embeddings} embeddings")]
    LengthMismatch { chunks: usize, embeddings: usize },
    #[error("embedder fingerprint mismatch: store has {expected:?}, got {actual:?}")]
    Fingerprint { expected: String, actual: String },
    #[error("unknown chunk id {0}")]
    UnknownChunk(String),
    #[error("unsupported store format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u64 },
    #[error("corrupted store record at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("store io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    chunk: DocumentChunk,
    embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub chunk: DocumentChunk,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    metadata: BTreeMap<String, String>,
    entries: Vec<Entry>,
    by_id: HashMap<String, usize>,
}

impl VectorStore {
    pub fn new(dim: usize, embedder_fingerprint: impl Into<String>) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(FINGERPRINT_KEY.to_string(), embedder_fingerprint.into());
        Self {
            dim,
            metadata,
            entries: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn fingerprint(&self) -> &str {
        self.metadata
            .get(FINGERPRINT_KEY)
            .map(String::as_str)
            .unwrap_or_default()
    }

    pub fn chunks(&self) -> impl Iterator<Item = &DocumentChunk> {
        self.entries.iter().map(|e| &e.chunk)
    }

    pub fn embedding(&self, chunk_id: &str) -> Option<&Embedding> {
        self.by_id.get(chunk_id).map(|&i| &self.entries[i].embedding)
    }

    pub fn check_fingerprint(&self, fingerprint: &str) -> Result<(), StoreError> {
        if self.fingerprint() != fingerprint {
            return Err(StoreError::Fingerprint {
                expected: self.fingerprint().to_string(),
                actual: fingerprint.to_string(),
            });
        }
        Ok(())
    }

    /// Appends chunks with their embeddings. Validation happens up front, so
    /// a failed call leaves the store untouched.
    pub fn add_chunks(
        &mut self,
        fingerprint: &str,
        chunks: Vec<DocumentChunk>,
        embeddings: Vec<Embedding>,
    ) -> Result<(), StoreError> {
        if chunks.len() != embeddings.len() {
            return Err(StoreError::LengthMismatch {
                chunks: chunks.len(),
                embeddings: embeddings.len(),
            });
        }
        if chunks.is_empty() {
            return Ok(());
        }
        self.check_fingerprint(fingerprint)?;
        let mut batch_ids = std::collections::HashSet::new();
        for (chunk, embedding) in chunks.iter().zip(&embeddings) {
            self.check_dim(embedding)?;
            if self.by_id.contains_key(&chunk.chunk_id) || !batch_ids.insert(&chunk.chunk_id) {
                return Err(StoreError::DuplicateChunk(chunk.chunk_id.clone()));
            }
        }
        for (chunk, embedding) in chunks.into_iter().zip(embeddings) {
            self.by_id.insert(chunk.chunk_id.clone(), self.entries.len());
            self.entries.push(Entry { chunk, embedding });
        }
        Ok(())
    }

    fn check_dim(&self, embedding: &Embedding) -> Result<(), StoreError> {
        if embedding.dim() != self.dim {
            return Err(StoreError::Dimension {
                expected: self.dim,
                actual: embedding.dim(),
            });
        }
        Ok(())
    }

    /// The `min(k, len)` entries most similar to `query`, best first.
    pub fn search(&self, query: &Embedding, k: usize) -> Result<Vec<SearchHit>, StoreError> {
        if k < 1 {
            return Err(StoreError::InvalidK);
        }
        if self.is_empty() {
            return Err(StoreError::Empty);
        }
        self.check_dim(query)?;
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.embedding.dot(query)))
            .collect();
        stable_sort_desc(&mut scored);
        scored.truncate(k);
        Ok(self.to_hits(scored))
    }

    /// Re-scores `hits` against `context` and keeps the best `k`. Hits with
    /// equal scores keep their incoming order.
    pub fn rerank(
        &self,
        hits: &[SearchHit],
        context: &Embedding,
        k: usize,
    ) -> Result<Vec<SearchHit>, StoreError> {
        if k < 1 {
            return Err(StoreError::InvalidK);
        }
        self.check_dim(context)?;
        let mut scored = Vec::with_capacity(hits.len());
        for hit in hits {
            let index = *self
                .by_id
                .get(&hit.chunk.chunk_id)
                .ok_or_else(|| StoreError::UnknownChunk(hit.chunk.chunk_id.clone()))?;
            scored.push((index, self.entries[index].embedding.dot(context)));
        }
        stable_sort_desc(&mut scored);
        scored.truncate(k);
        Ok(self.to_hits(scored))
    }

    /// Search `OVERFETCH_FACTOR * k` candidates for `query`, then rerank them
    /// to `k` against `context`.
    pub fn retrieve(
        &self,
        query: &Embedding,
        context: &Embedding,
        k: usize,
    ) -> Result<Vec<SearchHit>, StoreError> {
        let candidates = self.search(query, k.saturating_mul(OVERFETCH_FACTOR))?;
        self.rerank(&candidates, context, k)
    }

    fn to_hits(&self, scored: Vec<(usize, f64)>) -> Vec<SearchHit> {
        scored
            .into_iter()
            .enumerate()
            .map(|(pos, (i, score))| SearchHit {
                chunk: self.entries[i].chunk.clone(),
                score,
                rank: pos + 1,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let io_err = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        let header = Header {
            format_version: FORMAT_VERSION as u64,
            dim: self.dim,
            embedder_fingerprint: self.fingerprint().to_string(),
        };
        let line = serde_json::to_string(&header).expect("header serializes");
        writeln!(out, "{line}").map_err(io_err)?;
        for entry in &self.entries {
            let record = RecordRef {
                chunk_id: &entry.chunk.chunk_id,
                doc_id: &entry.chunk.doc_id,
                ordinal: entry.chunk.ordinal,
                text: &entry.chunk.text,
                char_span: entry.chunk.char_span,
                values: entry.embedding.values(),
            };
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let file = File::open(path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(BufReader::new(file))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, StoreError> {
        let mut lines = reader.lines().enumerate();
        let corrupt = |line: usize, message: String| StoreError::Corrupt { line, message };

        let (_, first) = lines.next().ok_or_else(|| corrupt(1, "missing header".into()))?;
        let first = first.map_err(|e| corrupt(1, e.to_string()))?;
        let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| corrupt(1, e.to_string()))?;
        match raw.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => return Err(StoreError::Version { found: v }),
            None => return Err(corrupt(1, "header lacks format_version".into())),
        }
        let header: Header = serde_json::from_value(raw).map_err(|e| corrupt(1, e.to_string()))?;

        let mut store = VectorStore::new(header.dim, header.embedder_fingerprint.clone());
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.map_err(|e| corrupt(lineno, e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line).map_err(|e| corrupt(lineno, e.to_string()))?;
            if record.values.len() != header.dim {
                return Err(corrupt(
                    lineno,
                    format!(
                        "vector has {} values, header says {}",
                        record.values.len(),
                        header.dim
                    ),
                ));
            }
            if record.values.iter().any(|v| !v.is_finite()) {
                return Err(corrupt(lineno, "non-finite vector component".into()));
            }
            let chunk = DocumentChunk {
                chunk_id: record.chunk_id,
                doc_id: record.doc_id,
                ordinal: record.ordinal,
                text: record.text,
                char_span: record.char_span,
            };
            store
                .add_chunks(
                    &header.embedder_fingerprint,
                    vec![chunk],
                    vec![Embedding::from_unit(record.values)],
                )
                .map_err(|e| corrupt(lineno, e.to_string()))?;
        }
        Ok(store)
    }
}

fn stable_sort_desc(scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u64,
    dim: usize,
    embedder_fingerprint: String,
}

#[derive(Serialize)]
struct RecordRef<'a> {
    chunk_id: &'a str,
    doc_id: &'a str,
    ordinal: usize,
    text: &'a str,
    char_span: (usize, usize),
    values: &'a [f64],
}

#[derive(Deserialize)]
struct Record {
    chunk_id: String,
    doc_id: String,
    ordinal: usize,
    text: String,
    char_span: (usize, usize),
    values: Vec<f64>,
}
