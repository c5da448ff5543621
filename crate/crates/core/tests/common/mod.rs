#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use rag_loop::embedding::Embedder;
use rag_loop::engine::EngineConfig;
use rag_loop::ingest::{chunk_document, ChunkConfig, RawDocument};
use rag_loop::llm::mock::Scenario;
use rag_loop::llm::{ChatProvider, MockProvider, MockScript};
use rag_loop::store::VectorStore;

pub const DIM: usize = 256;

pub fn embedder() -> Embedder {
    Embedder::local(DIM, 0)
}

pub const TOPICS: [&str; 6] = [
    "Rust ownership and borrowing rules prevent data races at compile time.",
    "Tokio schedules asynchronous tasks on a work-stealing thread pool.",
    "Cosine similarity of unit vectors equals their dot product.",
    "Chunking splits documents into overlapping character windows.",
    "Language model calls are billed per thousand prompt and completion tokens.",
    "Reranking orders retrieved passages against a composite context vector.",
];

/// Small in-memory corpus: one document per topic, each a few windows long.
pub async fn store() -> VectorStore {
    let embedder = embedder();
    let mut store = VectorStore::new(DIM, embedder.fingerprint());
    let chunking = ChunkConfig::new(200, 50).unwrap();
    for (i, topic) in TOPICS.iter().enumerate() {
        let doc = RawDocument {
            doc_id: format!("doc{i}.txt"),
            text: format!("{topic} ").repeat(6).trim_end().to_string(),
            source_path: format!("doc{i}.txt"),
        };
        let chunks = chunk_document(&doc, chunking).unwrap();
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let embeddings = embedder.embed_batch(&texts).await.unwrap();
        store
            .add_chunks(&embedder.fingerprint(), chunks, embeddings)
            .unwrap();
    }
    store
}

pub fn config(n_questions: usize) -> EngineConfig {
    EngineConfig {
        n_questions,
        ..EngineConfig::default()
    }
}

pub fn mock(script: &MockScript) -> Arc<dyn ChatProvider> {
    Arc::new(MockProvider::new(script.clone()))
}

pub fn ms(n: u64) -> Duration {
    Duration::from_millis(n)
}

/// 5 note tasks at 200 ms, every other call at 100 ms, satisfied at once.
pub fn timing_scenario() -> Scenario {
    Scenario::satisfied_at(1, 5).latencies(ms(100), ms(200), ms(100), ms(100))
}
