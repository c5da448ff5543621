//! Refinement: rewrite notes as a terse, dense set of statements.

use serde::{Deserialize, Serialize};

use super::{Notes, StageError, StageSettings};
use crate::llm::{Gateway, RoleTag, UsageRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub notes: Notes,
    pub input_chars: usize,
    pub output_chars: usize,
    /// `output_chars / input_chars`.
    pub compression_ratio: f64,
    pub usage: UsageRecord,
}

/// Replaces `notes` with the model's condensed rewrite.
pub async fn refine_notes(
    notes: &Notes,
    user_query: &str,
    iteration: u32,
    gateway: &Gateway,
    settings: &StageSettings,
) -> Result<RefineOutcome, StageError> {
    refine_text(notes.text(), user_query, iteration, 0, gateway, settings).await
}

/// Refines arbitrary text; `slot` keeps a second refine in the same
/// iteration (the optional final pass over the hypothesis) distinct.
pub async fn refine_text(
    text: &str,
    user_query: &str,
    iteration: u32,
    slot: u32,
    gateway: &Gateway,
    settings: &StageSettings,
) -> Result<RefineOutcome, StageError> {
    if text.trim().is_empty() {
        return Err(StageError::EmptyNotes);
    }
    if user_query.trim().is_empty() {
        return Err(StageError::EmptyQuery);
    }
    let chat = settings.request(
        RoleTag::Refine,
        &[("user_query", user_query), ("notes", text)],
        iteration,
        slot,
    );
    let (refined, usage) = gateway
        .chat_text(&chat)
        .await
        .map_err(StageError::gateway(RoleTag::Refine))?;
    let input_chars = text.chars().count();
    let notes = Notes::new(refined.trim());
    let output_chars = notes.char_count();
    Ok(RefineOutcome {
        compression_ratio: output_chars as f64 / input_chars as f64,
        notes,
        input_chars,
        output_chars,
        usage,
    })
}
