//! Iterative retrieval-augmented generation.
//!
//! The loop retrieves and reranks passages for a user query, brainstorms
//! follow-up queries and extracts notes for them concurrently, asks one
//! chain-of-thought call for a hypothesis plus a satisfied/not-satisfied
//! verdict, and condenses the notes before the next pass. A sequential,
//! two-call baseline and a bench mode comparing the two are included.

pub mod config;
pub mod embedding;
pub mod engine;
pub mod index;
pub mod ingest;
pub mod llm;
pub mod stages;
pub mod store;
pub mod transport;
