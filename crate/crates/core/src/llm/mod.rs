//! Chat-completion gateway.
//!
//! All model traffic goes through [`Gateway`], which talks to a
//! [`ChatProvider`], re-prompts on unusable JSON, and appends exactly one
//! [`UsageRecord`] per logical call to the shared [`CostLedger`], whether the
//! call succeeded or not.

mod http;
mod ledger;
pub mod mock;

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::transport::TransportError;

pub use http::{HttpProvider, HttpProviderConfig};
pub use ledger::{
    ledger_totals, CostLedger, LedgerTotals, PriceTable, RoleTotals, SharedLedger, UsageRecord,
};
pub use mock::{MockProvider, MockScript, MockStep};

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 2000;
/// Corrective re-prompts issued after an unusable JSON reply.
pub const MAX_JSON_RETRIES: u32 = 2;

const CORRECTIVE_INSTRUCTION: &str = "Your previous reply could not be used";

/// Which pipeline stage issued a call. Variant order is the order the stages
/// run within one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleTag {
    BrainstormQuestions,
    BrainstormNotes,
    HypSat,
    BaselineHypothesize,
    BaselineSatisfy,
    Refine,
}

impl RoleTag {
    pub const ALL: [RoleTag; 6] = [
        RoleTag::BrainstormQuestions,
        RoleTag::BrainstormNotes,
        RoleTag::HypSat,
        RoleTag::BaselineHypothesize,
        RoleTag::BaselineSatisfy,
        RoleTag::Refine,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RoleTag::BrainstormQuestions => "brainstorm-questions",
            RoleTag::BrainstormNotes => "brainstorm-notes",
            RoleTag::HypSat => "hyp-sat",
            RoleTag::BaselineHypothesize => "baseline-hypothesize",
            RoleTag::BaselineSatisfy => "baseline-satisfy",
            RoleTag::Refine => "refine",
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role_tag: RoleTag,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub json_mode: bool,
    /// Loop iteration this call belongs to (1-based).
    pub iteration: u32,
    /// Distinguishes sibling calls of one role within an iteration, e.g. the
    /// proposal index of a note-extraction task.
    pub slot: u32,
}

impl ChatRequest {
    pub fn new(role_tag: RoleTag, system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            role_tag,
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            json_mode: false,
            iteration: 0,
            slot: 0,
        }
    }

    pub fn json(mut self) -> Self {
        self.json_mode = true;
        self
    }

    pub fn at(mut self, iteration: u32, slot: u32) -> Self {
        self.iteration = iteration;
        self.slot = slot;
        self
    }

    pub fn sampling(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be > 0".into()));
        }
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompts must be non-empty".into()));
        }
        Ok(())
    }
}

/// Raw provider output for one attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{role} call {iteration}/{slot}: unusable JSON after {attempts} attempt(s): {reason}; raw response: {raw}")]
    Protocol {
        role: RoleTag,
        iteration: u32,
        slot: u32,
        attempts: u32,
        reason: String,
        raw: String,
    },
    #[error("{role} call: empty completion")]
    EmptyCompletion { role: RoleTag },
    #[error("mock script: {0}")]
    Script(String),
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("provider response: {0}")]
    BadResponse(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[async_trait]
pub trait ChatProvider: Send + Sync {
    fn name(&self) -> &str;

    async fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError>;
}

/// A provider plus the ledger its calls are billed to.
#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    ledger: SharedLedger,
}

impl Gateway {
    pub fn new(provider: Arc<dyn ChatProvider>, prices: PriceTable) -> Self {
        Self {
            provider,
            ledger: SharedLedger::new(prices),
        }
    }

    pub fn ledger(&self) -> &SharedLedger {
        &self.ledger
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    /// JSON-mode call returning the parsed body.
    pub async fn chat_json(&self, request: &ChatRequest) -> Result<(Value, UsageRecord), GatewayError> {
        self.chat_structured(request, Ok).await
    }

    /// JSON-mode call whose body must also pass `parse`. Both malformed JSON
    /// and a `parse` rejection trigger a corrective re-prompt, up to
    /// [`MAX_JSON_RETRIES`] times.
    pub async fn chat_structured<T, F>(
        &self,
        request: &ChatRequest,
        parse: F,
    ) -> Result<(T, UsageRecord), GatewayError>
    where
        F: Fn(Value) -> Result<T, String>,
    {
        let mut usage = UsageRecord::start(request);
        let started = Instant::now();
        let result = self.structured_attempts(request, &parse, &mut usage).await;
        self.finish(usage, started, result)
    }

    async fn structured_attempts<T, F>(
        &self,
        request: &ChatRequest,
        parse: &F,
        usage: &mut UsageRecord,
    ) -> Result<T, GatewayError>
    where
        F: Fn(Value) -> Result<T, String>,
    {
        if !request.json_mode {
            return Err(GatewayError::InvalidRequest(
                "chat_json requires json_mode".into(),
            ));
        }
        request.validate()?;
        let mut attempt_request = request.clone();
        for attempt in 0..=MAX_JSON_RETRIES {
            if attempt > 0 {
                usage.retries += 1;
            }
            let completion = self.provider.complete(&attempt_request).await?;
            usage.add(&completion);
            let reason = match serde_json::from_str::<Value>(completion.text.trim()) {
                Ok(value) => match parse(value) {
                    Ok(parsed) => return Ok(parsed),
                    Err(reason) => reason,
                },
                Err(e) => format!("not valid JSON ({e})"),
            };
            log::debug!(
                "{} {}/{} attempt {}: {reason}",
                request.role_tag,
                request.iteration,
                request.slot,
                attempt + 1
            );
            if attempt == MAX_JSON_RETRIES {
                return Err(GatewayError::Protocol {
                    role: request.role_tag,
                    iteration: request.iteration,
                    slot: request.slot,
                    attempts: attempt + 1,
                    reason,
                    raw: completion.text,
                });
            }
            attempt_request.user_prompt = format!(
                "{}\n\n{CORRECTIVE_INSTRUCTION}: {reason}. Reply again with exactly one valid JSON object in the required format and nothing else.",
                request.user_prompt
            );
        }
        unreachable!("loop returns on the final attempt")
    }

    /// Text-mode call returning the raw completion.
    pub async fn chat_text(&self, request: &ChatRequest) -> Result<(String, UsageRecord), GatewayError> {
        let mut usage = UsageRecord::start(request);
        let started = Instant::now();
        let result = async {
            if request.json_mode {
                return Err(GatewayError::InvalidRequest(
                    "chat_text requires json_mode off".into(),
                ));
            }
            request.validate()?;
            let completion = self.provider.complete(request).await?;
            usage.add(&completion);
            if completion.text.trim().is_empty() {
                return Err(GatewayError::EmptyCompletion {
                    role: request.role_tag,
                });
            }
            Ok(completion.text)
        }
        .await;
        self.finish(usage, started, result)
    }

    fn finish<T>(
        &self,
        mut usage: UsageRecord,
        started: Instant,
        result: Result<T, GatewayError>,
    ) -> Result<(T, UsageRecord), GatewayError> {
        usage.wall_clock = started.elapsed();
        self.ledger.append(usage.clone());
        result.map(|value| (value, usage))
    }
}

pub(crate) mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}
