//! Hypothesis and satisfaction verdicts.
//!
//! [`hypothesize_satisfy`] makes exactly one call that reasons step by step,
//! states a hypothesis and decides whether it satisfies the information
//! need. The baseline splits the same work over [`baseline_hypothesize`] and
//! [`baseline_satisfy`].

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Notes, QueryLog, StageError, StageSettings};
use crate::llm::{Gateway, RoleTag, UsageRecord};

#[derive(Debug, Clone, Copy)]
pub struct HypSatRequest<'a> {
    pub user_query: &'a str,
    pub notes: &'a Notes,
    pub query_log: &'a QueryLog,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub reasoning: String,
    pub hypothesis: String,
    pub satisfied: bool,
    pub feedback: String,
}

fn field_str(value: &Value, name: &str) -> Result<String, String> {
    match value.get(name) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(format!("\"{name}\" must be a string")),
        None => Err(format!("missing \"{name}\"")),
    }
}

fn field_bool(value: &Value, name: &str) -> Result<bool, String> {
    match value.get(name) {
        Some(Value::Bool(b)) => Ok(*b),
        Some(_) => Err(format!("\"{name}\" must be a JSON boolean")),
        None => Err(format!("missing \"{name}\"")),
    }
}

fn check_verdict(verdict: Verdict) -> Result<Verdict, String> {
    if verdict.satisfied && verdict.hypothesis.trim().is_empty() {
        return Err("\"hypothesis\" must not be empty when satisfied is true".into());
    }
    if !verdict.satisfied && verdict.feedback.trim().is_empty() {
        return Err("\"feedback\" must not be empty when satisfied is false".into());
    }
    Ok(verdict)
}

fn parse_verdict(value: Value) -> Result<Verdict, String> {
    check_verdict(Verdict {
        reasoning: field_str(&value, "reasoning")?,
        hypothesis: field_str(&value, "hypothesis")?,
        satisfied: field_bool(&value, "satisfied")?,
        feedback: field_str(&value, "feedback")?,
    })
}

fn check_query(user_query: &str) -> Result<(), StageError> {
    if user_query.trim().is_empty() {
        return Err(StageError::EmptyQuery);
    }
    Ok(())
}

pub async fn hypothesize_satisfy(
    request: HypSatRequest<'_>,
    gateway: &Gateway,
    settings: &StageSettings,
) -> Result<(Verdict, UsageRecord), StageError> {
    check_query(request.user_query)?;
    let log = request.query_log.render();
    let chat = settings
        .request(
            RoleTag::HypSat,
            &[
                ("user_query", request.user_query),
                ("query_log", &log),
                ("notes", request.notes.text()),
            ],
            request.iteration,
            0,
        )
        .json();
    gateway
        .chat_structured(&chat, parse_verdict)
        .await
        .map_err(StageError::gateway(RoleTag::HypSat))
}

/// First half of the baseline verdict: reasoning and hypothesis only.
pub async fn baseline_hypothesize(
    request: HypSatRequest<'_>,
    gateway: &Gateway,
    settings: &StageSettings,
) -> Result<((String, String), UsageRecord), StageError> {
    check_query(request.user_query)?;
    let log = request.query_log.render();
    let chat = settings
        .request(
            RoleTag::BaselineHypothesize,
            &[
                ("user_query", request.user_query),
                ("query_log", &log),
                ("notes", request.notes.text()),
            ],
            request.iteration,
            0,
        )
        .json();
    let parse = |value: Value| -> Result<(String, String), String> {
        Ok((field_str(&value, "reasoning")?, field_str(&value, "hypothesis")?))
    };
    gateway
        .chat_structured(&chat, parse)
        .await
        .map_err(StageError::gateway(RoleTag::BaselineHypothesize))
}

/// Second half of the baseline verdict: judges a given hypothesis.
pub async fn baseline_satisfy(
    request: HypSatRequest<'_>,
    reasoning: String,
    hypothesis: String,
    gateway: &Gateway,
    settings: &StageSettings,
) -> Result<(Verdict, UsageRecord), StageError> {
    check_query(request.user_query)?;
    let chat = settings
        .request(
            RoleTag::BaselineSatisfy,
            &[
                ("user_query", request.user_query),
                ("notes", request.notes.text()),
                ("hypothesis", &hypothesis),
            ],
            request.iteration,
            0,
        )
        .json();
    let parse = |value: Value| -> Result<Verdict, String> {
        check_verdict(Verdict {
            reasoning: reasoning.clone(),
            hypothesis: hypothesis.clone(),
            satisfied: field_bool(&value, "satisfied")?,
            feedback: field_str(&value, "feedback")?,
        })
    };
    gateway
        .chat_structured(&chat, parse)
        .await
        .map_err(StageError::gateway(RoleTag::BaselineSatisfy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{GatewayError, MockProvider, MockScript, MockStep, PriceTable};
    use serde_json::json;
    use std::sync::Arc;

    fn run(responses: Vec<Value>) -> Result<(Verdict, UsageRecord), StageError> {
        let steps = responses
            .into_iter()
            .map(|r| MockStep::json(RoleTag::HypSat, 1, 0, r))
            .collect();
        let gateway = Gateway::new(
            Arc::new(MockProvider::new(MockScript { steps })),
            PriceTable::default(),
        );
        let notes = Notes::new("some notes");
        let log = QueryLog::new();
        let request = HypSatRequest {
            user_query: "q",
            notes: &notes,
            query_log: &log,
            iteration: 1,
        };
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_time()
            .build()
            .unwrap();
        let result = rt.block_on(hypothesize_satisfy(request, &gateway, &StageSettings::default()));
        if result.is_ok() {
            assert_eq!(gateway.ledger().snapshot().records.len(), 1);
        }
        result
    }

    #[test]
    fn satisfied_passthrough() {
        let (v, usage) = run(vec![json!({
            "reasoning": "...", "hypothesis": "H", "satisfied": true, "feedback": ""
        })])
        .unwrap();
        assert!(v.satisfied);
        assert_eq!(v.hypothesis, "H");
        assert_eq!(usage.retries, 0);
    }

    #[test]
    fn feedback_verbatim() {
        let (v, _) = run(vec![json!({
            "reasoning": "r", "hypothesis": "", "satisfied": false, "feedback": "need sources on X"
        })])
        .unwrap();
        assert!(!v.satisfied);
        assert_eq!(v.feedback, "need sources on X");
    }

    fn assert_protocol(result: Result<(Verdict, UsageRecord), StageError>) {
        match result {
            Err(StageError::Gateway {
                role: RoleTag::HypSat,
                source: GatewayError::Protocol { .. },
            }) => {}
            other => panic!("expected protocol error, got {other:?}"),
        }
    }

    #[test]
    fn missing_satisfied_is_protocol_error() {
        let bad = json!({"reasoning": "r", "hypothesis": "H", "feedback": ""});
        assert_protocol(run(vec![bad.clone(), bad.clone(), bad]));
    }

    #[test]
    fn string_boolean_is_protocol_error() {
        let bad = json!({"reasoning": "r", "hypothesis": "H", "satisfied": "true", "feedback": ""});
        assert_protocol(run(vec![bad.clone(), bad.clone(), bad]));
    }

    #[test]
    fn schema_violation_recovers_on_retry() {
        let (v, usage) = run(vec![
            json!({"reasoning": "r", "hypothesis": "", "satisfied": true, "feedback": ""}),
            json!({"reasoning": "r", "hypothesis": "H", "satisfied": true, "feedback": ""}),
        ])
        .unwrap();
        assert!(v.satisfied);
        assert_eq!(usage.retries, 1);
    }
}
