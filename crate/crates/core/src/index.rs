//! Load -> chunk -> embed -> store.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::embedding::{EmbedError, Embedder};
use crate::ingest::{self, ChunkConfig, IngestError};
use crate::store::{StoreError, VectorStore};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IndexSummary {
    pub documents: usize,
    pub chunks: usize,
    /// Chunks holding only whitespace, which have nothing to embed.
    pub skipped: usize,
}

/// Adds every document under `paths` to `store`. Nothing is added unless all
/// documents load, chunk and embed.
pub async fn index_paths<P: AsRef<Path>>(
    store: &mut VectorStore,
    paths: &[P],
    chunking: ChunkConfig,
    embedder: &Embedder,
) -> Result<IndexSummary, IndexError> {
    store.check_fingerprint(&embedder.fingerprint())?;
    let docs = ingest::load_documents(paths)?;
    let mut chunks = Vec::new();
    let mut skipped = 0;
    for doc in &docs {
        for chunk in ingest::chunk_document(doc, chunking)? {
            if chunk.text.trim().is_empty() {
                skipped += 1;
            } else {
                chunks.push(chunk);
            }
        }
    }
    let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
    let embeddings = embedder.embed_batch(&texts).await?;
    let summary = IndexSummary {
        documents: docs.len(),
        chunks: chunks.len(),
        skipped,
    };
    store.add_chunks(&embedder.fingerprint(), chunks, embeddings)?;
    Ok(summary)
}
