//! Document loading and fixed-window chunking.
//!
//! Offsets and lengths in this module are measured in Unicode scalar values
//! (`char`s), not bytes, so chunk boundaries never split a code point.

use std::collections::HashSet;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

pub const DEFAULT_CHUNK_SIZE: usize = 1000;
pub const DEFAULT_OVERLAP: usize = 200;

const SUPPORTED_EXTENSIONS: &[&str] = &["txt", "md"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: empty document")]
    EmptyDocument { path: String },
    #[error("{path}: unsupported file type (expected .txt or .md)")]
    Unsupported { path: String },
    #[error("duplicate document id {0}")]
    DuplicateDocId(String),
    #[error("invalid chunking configuration: chunk_size={chunk_size}, overlap={overlap}")]
    Config { chunk_size: usize, overlap: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub text: String,
    pub source_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    /// Half-open `[start, end)` character range into the source document.
    pub char_span: (usize, usize),
}

/// Chunking parameters. `overlap` must be strictly smaller than `chunk_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

impl ChunkConfig {
    pub fn new(chunk_size: usize, overlap: usize) -> Result<Self, IngestError> {
        if chunk_size == 0 || overlap >= chunk_size {
            return Err(IngestError::Config { chunk_size, overlap });
        }
        Ok(Self { chunk_size, overlap })
    }

    pub fn stride(&self) -> usize {
        self.chunk_size - self.overlap
    }
}

/// Loads every input path as a document. Directories expand to their `.txt`
/// and `.md` files (recursively, sorted by path); explicit files keep the
/// order they were given in.
pub fn load_documents<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<RawDocument>, IngestError> {
    let mut files = Vec::new();
    for path in paths {
        let path = path.as_ref();
        if path.is_dir() {
            let mut found: Vec<PathBuf> = WalkDir::new(path)
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file() && is_supported(e.path()))
                .map(|e| e.into_path())
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(path.to_path_buf());
        }
    }

    let mut seen = HashSet::new();
    let mut docs = Vec::with_capacity(files.len());
    for file in files {
        let doc = load_document(&file)?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(IngestError::DuplicateDocId(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

fn load_document(path: &Path) -> Result<RawDocument, IngestError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Read {
        path: shown.clone(),
        source,
    })?;
    if !is_supported(path) {
        return Err(IngestError::Unsupported { path: shown });
    }
    if text.trim().is_empty() {
        return Err(IngestError::EmptyDocument { path: shown });
    }
    Ok(RawDocument {
        doc_id: normalize_path(path),
        text,
        source_path: shown,
    })
}

fn is_supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| SUPPORTED_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Forward-slash path with `.` components removed.
fn normalize_path(path: &Path) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut absolute = false;
    for component in path.components() {
        match component {
            Component::RootDir => absolute = true,
            Component::CurDir => {}
            Component::Prefix(p) => parts.push(p.as_os_str().to_string_lossy().into_owned()),
            Component::ParentDir => parts.push("..".to_string()),
            Component::Normal(s) => parts.push(s.to_string_lossy().into_owned()),
        }
    }
    let joined = parts.join("/");
    if absolute {
        format!("/{joined}")
    } else {
        joined
    }
}

/// Splits a document into windows of `chunk_size` chars starting at every
/// multiple of the stride that lies inside the text. The last window may be
/// shorter.
pub fn chunk_document(doc: &RawDocument, config: ChunkConfig) -> Result<Vec<DocumentChunk>, IngestError> {
    let config = ChunkConfig::new(config.chunk_size, config.overlap)?;
    if doc.text.trim().is_empty() {
        return Err(IngestError::EmptyDocument {
            path: doc.source_path.clone(),
        });
    }

    // byte offset of every char boundary, including the end of the text
    let mut bounds: Vec<usize> = doc.text.char_indices().map(|(i, _)| i).collect();
    let len = bounds.len();
    bounds.push(doc.text.len());

    let stride = config.stride();
    let chunks = (0..len)
        .step_by(stride)
        .enumerate()
        .map(|(ordinal, start)| {
            let end = (start + config.chunk_size).min(len);
            DocumentChunk {
                chunk_id: format!("{}:{}", doc.doc_id, ordinal),
                doc_id: doc.doc_id.clone(),
                ordinal,
                text: doc.text[bounds[start]..bounds[end]].to_string(),
                char_span: (start, end),
            }
        })
        .collect();
    Ok(chunks)
}

/// Rebuilds the document text from its ordered chunks by dropping the
/// overlapping prefix of every chunk after the first.
pub fn reassemble(chunks: &[DocumentChunk]) -> String {
    let mut out = String::new();
    let mut covered = 0;
    for chunk in chunks {
        let (start, end) = chunk.char_span;
        if end <= covered {
            continue;
        }
        let skip = covered.saturating_sub(start);
        out.extend(chunk.text.chars().skip(skip));
        covered = end;
    }
    out
}
