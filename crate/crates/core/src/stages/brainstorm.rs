//! Concurrent brainstorming.
//!
//! One call proposes follow-up queries. Each surviving query then runs an
//! independent embed -> search -> rerank -> note-extraction task, at most
//! `parallelism` at a time. Results are merged in proposal order regardless of
//! which task finishes first.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{normalize_query, Notes, QueryLog, StageError, StageSettings};
use crate::embedding::Embedder;
use crate::llm::{Gateway, RoleTag, UsageRecord};
use crate::store::{SearchHit, StoreError, VectorStore};

/// Character budget for the passages given to one note-extraction call.
pub const CHUNK_CONTEXT_CAP: usize = 6000;

#[derive(Debug, Clone, Copy)]
pub struct BrainstormRequest<'a> {
    pub user_query: &'a str,
    pub notes: &'a Notes,
    pub query_log: &'a QueryLog,
    pub store: &'a VectorStore,
    pub embedder: &'a Embedder,
    pub n_questions: usize,
    pub k: usize,
    pub parallelism: usize,
    pub iteration: u32,
    /// Passages retrieved for the user query before the loop started; shown
    /// to the question proposal call when present.
    pub seed_context: Option<&'a [SearchHit]>,
}

/// What one note-extraction task retrieved and extracted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRetrieval {
    pub slot: u32,
    pub query: String,
    pub chunk_ids: Vec<String>,
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct BrainstormOutcome {
    /// Everything the model proposed, before deduplication.
    pub proposed: Vec<String>,
    /// Proposals that survived deduplication, in proposal order.
    pub new_queries: Vec<String>,
    pub notes: Notes,
    pub retrievals: Vec<QueryRetrieval>,
    pub usage: Vec<UsageRecord>,
    /// Wall-clock time of the note-extraction fan-out.
    pub note_phase: Duration,
}

pub async fn brainstorm_concurrent(
    request: BrainstormRequest<'_>,
    gateway: &Gateway,
    settings: &StageSettings,
) -> Result<BrainstormOutcome, StageError> {
    if request.user_query.trim().is_empty() {
        return Err(StageError::EmptyQuery);
    }
    if request.n_questions < 1 || request.parallelism < 1 || request.k < 1 {
        return Err(StageError::Config(format!(
            "n_questions={}, k={}, parallelism={} must all be >= 1",
            request.n_questions, request.k, request.parallelism
        )));
    }
    if request.store.is_empty() {
        return Err(StoreError::Empty.into());
    }

    let seed_chunks = request
        .seed_context
        .map(|hits| build_chunk_context(hits, CHUNK_CONTEXT_CAP).0)
        .unwrap_or_default();
    let n = request.n_questions.to_string();
    let query_log = request.query_log.render();
    let questions_request = settings
        .request(
            RoleTag::BrainstormQuestions,
            &[
                ("user_query", request.user_query),
                ("query_log", &query_log),
                ("notes", request.notes.text()),
                ("chunks", &seed_chunks),
                ("n_questions", &n),
            ],
            request.iteration,
            0,
        )
        .json();
    let (mut proposed, questions_usage) = gateway
        .chat_structured(&questions_request, parse_questions)
        .await
        .map_err(StageError::gateway(RoleTag::BrainstormQuestions))?;
    proposed.truncate(request.n_questions);

    let survivors = deduplicate(&proposed, request.user_query, request.query_log);
    let mut usage = vec![questions_usage];
    if survivors.is_empty() {
        return Ok(BrainstormOutcome {
            proposed,
            new_queries: Vec::new(),
            notes: request.notes.clone(),
            retrievals: Vec::new(),
            usage,
            note_phase: Duration::ZERO,
        });
    }

    let started = Instant::now();
    let context_text = if request.notes.is_empty() {
        request.user_query.to_string()
    } else {
        format!("{}\n{}", request.user_query, request.notes.text())
    };
    let context = request.embedder.embed_text(&context_text).await?;

    let results: Vec<_> = stream::iter(survivors.iter().cloned())
        .map(|(slot, query)| {
            let context = &context;
            async move {
                let outcome = extract_notes(&request, gateway, settings, context, slot, &query).await;
                outcome.map_err(|source| StageError::NoteExtraction {
                    query,
                    source: Box::new(source),
                })
            }
        })
        .buffered(request.parallelism)
        .collect()
        .await;
    let note_phase = started.elapsed();

    let mut retrievals = Vec::with_capacity(results.len());
    for result in results {
        let (retrieval, record) = result?;
        usage.push(record);
        retrievals.push(retrieval);
    }

    let blocks: Vec<&str> = retrievals
        .iter()
        .map(|r| r.note.trim())
        .filter(|n| !n.is_empty())
        .collect();
    let mut notes = request.notes.clone();
    notes.append_blocks(&blocks);

    Ok(BrainstormOutcome {
        proposed,
        new_queries: survivors.into_iter().map(|(_, q)| q).collect(),
        notes,
        retrievals,
        usage,
        note_phase,
    })
}

async fn extract_notes(
    request: &BrainstormRequest<'_>,
    gateway: &Gateway,
    settings: &StageSettings,
    context: &crate::embedding::Embedding,
    slot: u32,
    query: &str,
) -> Result<(QueryRetrieval, UsageRecord), StageError> {
    let query_embedding = request.embedder.embed_text(query).await?;
    let hits = request.store.retrieve(&query_embedding, context, request.k)?;
    let (chunks, chunk_ids) = build_chunk_context(&hits, CHUNK_CONTEXT_CAP);
    let chat = settings
        .request(
            RoleTag::BrainstormNotes,
            &[
                ("user_query", request.user_query),
                ("query", query),
                ("chunks", &chunks),
            ],
            request.iteration,
            slot,
        )
        .json();
    let (note, record) = gateway
        .chat_structured(&chat, parse_notes)
        .await
        .map_err(StageError::gateway(RoleTag::BrainstormNotes))?;
    Ok((
        QueryRetrieval {
            slot,
            query: query.to_string(),
            chunk_ids,
            note,
        },
        record,
    ))
}

/// Keeps proposals that differ from the user query, the log, and each other.
/// Each survivor carries its index in the proposal list.
fn deduplicate(proposed: &[String], user_query: &str, log: &QueryLog) -> Vec<(u32, String)> {
    let mut seen: HashSet<String> = HashSet::new();
    seen.insert(normalize_query(user_query));
    proposed
        .iter()
        .enumerate()
        .filter(|(_, q)| {
            let key = normalize_query(q);
            !key.is_empty() && !log.contains(q) && seen.insert(key)
        })
        .map(|(i, q)| (i as u32, q.trim().to_string()))
        .collect()
}

/// Formats ranked passages for a prompt, dropping the lowest-ranked ones
/// until the text fits in `cap` characters. A lone passage that is still too
/// long is cut. Returns the text and the ids of the passages kept.
pub fn build_chunk_context(hits: &[SearchHit], cap: usize) -> (String, Vec<String>) {
    let blocks: Vec<String> = hits
        .iter()
        .map(|h| format!("[{}] {}\n{}", h.rank, h.chunk.chunk_id, h.chunk.text))
        .collect();
    let mut keep = blocks.len();
    let total = |n: usize| -> usize {
        blocks[..n].iter().map(|b| b.chars().count()).sum::<usize>() + 2 * n.saturating_sub(1)
    };
    while keep > 1 && total(keep) > cap {
        keep -= 1;
    }
    let mut text = blocks[..keep].join("\n\n");
    if text.chars().count() > cap {
        text = text.chars().take(cap).collect();
    }
    let ids = hits[..keep].iter().map(|h| h.chunk.chunk_id.clone()).collect();
    (text, ids)
}

fn parse_questions(value: Value) -> Result<Vec<String>, String> {
    let list = value
        .get("questions")
        .and_then(Value::as_array)
        .ok_or("expected an object with a \"questions\" array")?;
    list.iter()
        .map(|q| {
            q.as_str()
                .map(str::to_string)
                .ok_or_else(|| "every question must be a string".to_string())
        })
        .collect()
}

fn parse_notes(value: Value) -> Result<String, String> {
    match value.get("notes") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|i| {
                i.as_str()
                    .ok_or_else(|| "notes array must hold strings".to_string())
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|parts| parts.join("\n")),
        _ => Err("expected an object with a \"notes\" string".into()),
    }
}
