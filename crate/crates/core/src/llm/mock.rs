//! Scripted provider for tests, offline runs and benchmarks.
//!
//! Steps are keyed by `(role_tag, iteration, slot)`, never by prompt text, so
//! prompt templates can change without breaking scripts. Several steps with
//! the same key are served in order to successive attempts of that call
//! (the corrective JSON re-prompts). Simulated latency is a `tokio` sleep
//! taken outside any lock, so concurrent calls overlap their latency.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatProvider, ChatRequest, Completion, GatewayError, RoleTag};

type StepKey = (RoleTag, u32, u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockStep {
    pub role_tag: RoleTag,
    pub iteration: u32,
    #[serde(default)]
    pub slot: u32,
    /// A JSON string is returned verbatim; any other JSON value is returned
    /// in its compact serialized form.
    pub response: Value,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

impl MockStep {
    pub fn text(role_tag: RoleTag, iteration: u32, slot: u32, response: impl Into<String>) -> Self {
        Self {
            role_tag,
            iteration,
            slot,
            response: Value::String(response.into()),
            latency_ms: 0,
            prompt_tokens: 0,
            completion_tokens: 0,
        }
    }

    pub fn json(role_tag: RoleTag, iteration: u32, slot: u32, response: Value) -> Self {
        Self {
            response,
            ..Self::text(role_tag, iteration, slot, "")
        }
    }

    pub fn latency(mut self, latency: Duration) -> Self {
        self.latency_ms = latency.as_millis() as u64;
        self
    }

    pub fn tokens(mut self, prompt: u64, completion: u64) -> Self {
        self.prompt_tokens = prompt;
        self.completion_tokens = completion;
        self
    }

    pub fn response_text(&self) -> String {
        match &self.response {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }

    fn key(&self) -> StepKey {
        (self.role_tag, self.iteration, self.slot)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub steps: Vec<MockStep>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Script(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }
}

#[derive(Debug)]
pub struct MockProvider {
    queues: Mutex<HashMap<StepKey, VecDeque<MockStep>>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        let mut queues: HashMap<StepKey, VecDeque<MockStep>> = HashMap::new();
        for step in script.steps {
            queues.entry(step.key()).or_default().push_back(step);
        }
        Self {
            queues: Mutex::new(queues),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Every request received, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("mock lock").clone()
    }

    /// Steps that were never served.
    pub fn unconsumed(&self) -> Vec<MockStep> {
        let queues = self.queues.lock().expect("mock lock");
        let mut rest: Vec<MockStep> = queues.values().flatten().cloned().collect();
        rest.sort_by_key(MockStep::key);
        rest
    }
}

#[async_trait]
impl ChatProvider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    async fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        self.requests.lock().expect("mock lock").push(request.clone());
        let step = {
            let mut queues = self.queues.lock().expect("mock lock");
            queues
                .get_mut(&(request.role_tag, request.iteration, request.slot))
                .and_then(VecDeque::pop_front)
        };
        let step = step.ok_or_else(|| {
            GatewayError::Script(format!(
                "no step for role {} iteration {} slot {}",
                request.role_tag, request.iteration, request.slot
            ))
        })?;
        if step.latency_ms > 0 {
            tokio::time::sleep(Duration::from_millis(step.latency_ms)).await;
        }
        Ok(Completion {
            text: step.response_text(),
            prompt_tokens: step.prompt_tokens,
            completion_tokens: step.completion_tokens,
        })
    }
}

/// Generates a complete, consistent script covering both the proposed loop
/// and the sequential baseline for `iterations` passes.
///
/// Questions proposed at iteration `i` are `"follow-up question {i}.{j}"`;
/// the note for proposal `j` is `"note {i}.{j}"`; the verdict is satisfied at
/// `satisfied_at` (if any). Every call uses the same token counts.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub n_questions: u32,
    pub iterations: u32,
    pub satisfied_at: Option<u32>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub questions_latency: Duration,
    pub notes_latency: Duration,
    pub verdict_latency: Duration,
    pub refine_latency: Duration,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            n_questions: 5,
            iterations: 1,
            satisfied_at: Some(1),
            prompt_tokens: 100,
            completion_tokens: 50,
            questions_latency: Duration::ZERO,
            notes_latency: Duration::ZERO,
            verdict_latency: Duration::ZERO,
            refine_latency: Duration::ZERO,
        }
    }
}

impl Scenario {
    pub fn satisfied_at(iteration: u32, n_questions: u32) -> Self {
        Self {
            n_questions,
            iterations: iteration,
            satisfied_at: Some(iteration),
            ..Self::default()
        }
    }

    pub fn never_satisfied(iterations: u32, n_questions: u32) -> Self {
        Self {
            n_questions,
            iterations,
            satisfied_at: None,
            ..Self::default()
        }
    }

    pub fn latencies(
        mut self,
        questions: Duration,
        notes: Duration,
        verdict: Duration,
        refine: Duration,
    ) -> Self {
        self.questions_latency = questions;
        self.notes_latency = notes;
        self.verdict_latency = verdict;
        self.refine_latency = refine;
        self
    }

    pub fn question(iteration: u32, j: u32) -> String {
        format!("follow-up question {iteration}.{j}")
    }

    pub fn note(iteration: u32, j: u32) -> String {
        format!("note {iteration}.{j}")
    }

    pub fn hypothesis(iteration: u32) -> String {
        format!("hypothesis after iteration {iteration}")
    }

    pub fn feedback(iteration: u32) -> String {
        format!("feedback after iteration {iteration}: evidence incomplete")
    }

    pub fn refined(iteration: u32) -> String {
        format!("refined notes {iteration}")
    }

    pub fn script(&self) -> MockScript {
        let mut steps = Vec::new();
        let tokens = |s: MockStep| s.tokens(self.prompt_tokens, self.completion_tokens);
        for it in 1..=self.iterations {
            let questions: Vec<String> = (0..self.n_questions).map(|j| Self::question(it, j)).collect();
            steps.push(tokens(
                MockStep::json(
                    RoleTag::BrainstormQuestions,
                    it,
                    0,
                    json!({ "questions": questions }),
                )
                .latency(self.questions_latency),
            ));
            for j in 0..self.n_questions {
                steps.push(tokens(
                    MockStep::json(
                        RoleTag::BrainstormNotes,
                        it,
                        j,
                        json!({ "notes": Self::note(it, j) }),
                    )
                    .latency(self.notes_latency),
                ));
            }
            let satisfied = self.satisfied_at == Some(it);
            let feedback = if satisfied {
                String::new()
            } else {
                Self::feedback(it)
            };
            steps.push(tokens(
                MockStep::json(
                    RoleTag::HypSat,
                    it,
                    0,
                    json!({
                        "reasoning": format!("step-by-step reasoning {it}"),
                        "hypothesis": Self::hypothesis(it),
                        "satisfied": satisfied,
                        "feedback": feedback,
                    }),
                )
                .latency(self.verdict_latency),
            ));
            steps.push(tokens(
                MockStep::json(
                    RoleTag::BaselineHypothesize,
                    it,
                    0,
                    json!({
                        "reasoning": format!("step-by-step reasoning {it}"),
                        "hypothesis": Self::hypothesis(it),
                    }),
                )
                .latency(self.verdict_latency),
            ));
            steps.push(tokens(
                MockStep::json(
                    RoleTag::BaselineSatisfy,
                    it,
                    0,
                    json!({ "satisfied": satisfied, "feedback": feedback }),
                )
                .latency(self.verdict_latency),
            ));
            if !satisfied && it < self.iterations {
                steps.push(tokens(
                    MockStep::text(RoleTag::Refine, it, 0, Self::refined(it)).latency(self.refine_latency),
                ));
            }
            if satisfied {
                break;
            }
        }
        MockScript { steps }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn identical_scripts_replay_identically() {
        let script = Scenario::satisfied_at(2, 3).script();
        let run = |script: MockScript| async move {
            let mock = MockProvider::new(script);
            let mut out = Vec::new();
            for step in Scenario::satisfied_at(2, 3).script().steps {
                let req = ChatRequest::new(step.role_tag, "s", "u").at(step.iteration, step.slot);
                let c = mock.complete(&req).await.unwrap();
                out.push((c.text, c.prompt_tokens, c.completion_tokens));
            }
            out
        };
        assert_eq!(run(script.clone()).await, run(script).await);
    }

    #[tokio::test]
    async fn same_key_steps_serve_successive_attempts() {
        let mock = MockProvider::new(MockScript {
            steps: vec![
                MockStep::text(RoleTag::HypSat, 1, 0, "first"),
                MockStep::text(RoleTag::HypSat, 1, 0, "second"),
            ],
        });
        let req = ChatRequest::new(RoleTag::HypSat, "s", "u").at(1, 0);
        assert_eq!(mock.complete(&req).await.unwrap().text, "first");
        assert_eq!(mock.complete(&req).await.unwrap().text, "second");
        assert!(matches!(mock.complete(&req).await, Err(GatewayError::Script(_))));
        assert!(mock.unconsumed().is_empty());
    }

    #[tokio::test]
    async fn concurrent_latency_overlaps() {
        let steps = (0..5)
            .map(|j| MockStep::text(RoleTag::BrainstormNotes, 1, j, "n").latency(Duration::from_millis(200)))
            .collect();
        let mock = MockProvider::new(MockScript { steps });
        let started = std::time::Instant::now();
        let calls = (0..5).map(|j| {
            let req = ChatRequest::new(RoleTag::BrainstormNotes, "s", "u").at(1, j);
            let mock = &mock;
            async move { mock.complete(&req).await.unwrap() }
        });
        futures::future::join_all(calls).await;
        assert!(started.elapsed() < Duration::from_millis(450));
    }

    #[test]
    fn script_json_accepts_string_or_object_responses() {
        let text = r#"{"steps": [
            {"role_tag": "hyp-sat", "iteration": 1, "response": "not json"},
            {"role_tag": "hyp-sat", "iteration": 1, "response": {"ok": true}, "latency_ms": 5, "prompt_tokens": 3, "completion_tokens": 2}
        ]}"#;
        let script: MockScript = serde_json::from_str(text).unwrap();
        assert_eq!(script.steps[0].response_text(), "not json");
        assert_eq!(script.steps[1].response_text(), r#"{"ok":true}"#);
        assert_eq!(script.steps[1].slot, 0);
    }

    #[test]
    fn scenario_shape() {
        let s = Scenario::never_satisfied(4, 2).script();
        let count = |role| s.steps.iter().filter(|st| st.role_tag == role).count();
        assert_eq!(count(RoleTag::HypSat), 4);
        assert_eq!(count(RoleTag::Refine), 3);
        assert_eq!(count(RoleTag::BrainstormNotes), 8);
    }
}
