//! The three loop stages: concurrent brainstorming, the hybrid
//! hypothesize-satisfy verdict, and refinement. The baseline's two-call
//! verdict lives here too so both arms share one set of parsers.

mod brainstorm;
pub mod prompts;
mod refine;
mod verdict;

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbedError;
use crate::llm::{ChatRequest, GatewayError, RoleTag, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use crate::store::StoreError;

pub use brainstorm::{
    brainstorm_concurrent, build_chunk_context, BrainstormOutcome, BrainstormRequest, QueryRetrieval,
    CHUNK_CONTEXT_CAP,
};
pub use prompts::{PromptSet, PromptTemplate};
pub use refine::{refine_notes, refine_text, RefineOutcome};
pub use verdict::{baseline_hypothesize, baseline_satisfy, hypothesize_satisfy, HypSatRequest, Verdict};

#[derive(Debug, Error)]
pub enum StageError {
    #[error("{role} call failed: {source}")]
    Gateway {
        role: RoleTag,
        #[source]
        source: GatewayError,
    },
    #[error("note extraction for query {query:?} failed: {source}")]
    NoteExtraction {
        query: String,
        #[source]
        source: Box<StageError>,
    },
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("retrieval failed: {0}")]
    Store(#[from] StoreError),
    #[error("refine called with empty notes")]
    EmptyNotes,
    #[error("user query is empty")]
    EmptyQuery,
    #[error("invalid stage configuration: {0}")]
    Config(String),
}

impl StageError {
    fn gateway(role: RoleTag) -> impl FnOnce(GatewayError) -> StageError {
        move |source| StageError::Gateway { role, source }
    }

    /// The innermost gateway error, if the failure came from a model call.
    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            StageError::Gateway { source, .. } => Some(source),
            StageError::NoteExtraction { source, .. } => source.gateway_error(),
            _ => None,
        }
    }
}

/// Sampling settings and prompt templates shared by every stage call.
#[derive(Debug, Clone)]
pub struct StageSettings {
    pub temperature: f64,
    pub max_tokens: u32,
    pub prompts: Arc<PromptSet>,
}

impl Default for StageSettings {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            prompts: Arc::new(PromptSet::builtin()),
        }
    }
}

impl StageSettings {
    pub(crate) fn request(
        &self,
        role: RoleTag,
        vars: &[(&str, &str)],
        iteration: u32,
        slot: u32,
    ) -> ChatRequest {
        let (system, user) = self.prompts.get(role).render(vars);
        ChatRequest::new(role, system, user)
            .sampling(self.temperature, self.max_tokens)
            .at(iteration, slot)
    }
}

/// Accumulated evidence. Grows by brainstorm merges; refine replaces it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notes {
    text: String,
    char_count: usize,
}

impl Notes {
    pub const SEPARATOR: &'static str = "\n\n";

    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let char_count = text.chars().count();
        Self { text, char_count }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn char_count(&self) -> usize {
        self.char_count
    }

    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty()
    }

    /// Appends blocks separated by blank lines.
    pub fn append_blocks<S: AsRef<str>>(&mut self, blocks: &[S]) {
        for block in blocks {
            if !self.text.is_empty() {
                self.text.push_str(Self::SEPARATOR);
            }
            self.text.push_str(block.as_ref());
        }
        self.char_count = self.text.chars().count();
    }
}

/// Lowercase, collapse whitespace, strip trailing punctuation.
pub fn normalize_query(query: &str) -> String {
    let collapsed = query
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| {
            c.is_ascii_punctuation() || matches!(c, '？' | '！' | '。' | '…') || c.is_whitespace()
        })
        .to_string()
}

/// Issued follow-up queries in proposal order, unique under
/// [`normalize_query`]. The user's own query is held separately.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct QueryLog {
    entries: Vec<String>,
    seen: HashSet<String>,
}

impl From<Vec<String>> for QueryLog {
    fn from(queries: Vec<String>) -> Self {
        let mut log = QueryLog::new();
        log.extend(queries);
        log
    }
}

impl From<QueryLog> for Vec<String> {
    fn from(log: QueryLog) -> Self {
        log.entries
    }
}

impl QueryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, query: &str) -> bool {
        self.seen.contains(&normalize_query(query))
    }

    /// Adds `query` unless an equivalent one is already present.
    pub fn push(&mut self, query: impl Into<String>) -> bool {
        let query = query.into();
        let key = normalize_query(&query);
        if key.is_empty() || !self.seen.insert(key) {
            return false;
        }
        self.entries.push(query);
        true
    }

    pub fn extend<I: IntoIterator<Item = String>>(&mut self, queries: I) {
        for q in queries {
            self.push(q);
        }
    }

    /// Numbered list for prompts.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, q)| format!("{}. {q}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_query("  What   IS  Rust?? "), "what is rust");
        assert_eq!(normalize_query("why.\n"), "why");
        assert_eq!(normalize_query("a\tb"), "a b");
    }

    #[test]
    fn query_log_dedups_and_keeps_order() {
        let mut log = QueryLog::new();
        assert!(log.push("What is X?"));
        assert!(!log.push("what  is x"));
        assert!(log.push("Why Y"));
        assert!(!log.push("?!"));
        assert_eq!(log.entries(), ["What is X?", "Why Y"]);
        assert_eq!(log.render(), "1. What is X?\n2. Why Y");
    }

    #[test]
    fn notes_append_and_count() {
        let mut notes = Notes::default();
        notes.append_blocks(&["a", "bé"]);
        assert_eq!(notes.text(), "a\n\nbé");
        assert_eq!(notes.char_count(), 5);
        notes.append_blocks::<&str>(&[]);
        assert_eq!(notes.text(), "a\n\nbé");
    }

    proptest! {
        #[test]
        fn query_log_stays_unique(batches in proptest::collection::vec(
            proptest::collection::vec("[A-Ca-c ?.]{1,6}", 0..6), 0..6)) {
            let mut log = QueryLog::new();
            for batch in batches {
                log.extend(batch);
                let keys: HashSet<_> = log.entries().iter().map(|q| normalize_query(q)).collect();
                prop_assert_eq!(keys.len(), log.len());
            }
        }
    }
}
