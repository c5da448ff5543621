mod common;

use std::sync::Arc;

use rag_loop::llm::{Gateway, MockProvider, MockScript, MockStep, PriceTable, RoleTag};
use rag_loop::stages::{
    brainstorm_concurrent, BrainstormRequest, Notes, QueryLog, StageError, StageSettings,
};
use rag_loop::store::VectorStore;
use serde_json::json;

use common::ms;

/// Proposes `questions` at iteration 1; the note for proposal `j` is
/// `"block j"`, with earlier proposals finishing last.
fn script(questions: &[&str]) -> MockScript {
    let mut steps = vec![MockStep::json(
        RoleTag::BrainstormQuestions,
        1,
        0,
        json!({ "questions": questions }),
    )
    .tokens(40, 20)];
    let n = questions.len() as u64;
    for j in 0..questions.len() as u32 {
        steps.push(
            MockStep::json(
                RoleTag::BrainstormNotes,
                1,
                j,
                json!({ "notes": format!("block {j}") }),
            )
            .latency(ms(20 * (n - u64::from(j))))
            .tokens(30, 10),
        );
    }
    MockScript { steps }
}

async fn brainstorm(
    script: &MockScript,
    store: &VectorStore,
    notes: &Notes,
    log: &QueryLog,
    n_questions: usize,
    parallelism: usize,
) -> (Result<rag_loop::stages::BrainstormOutcome, StageError>, Gateway) {
    let gateway = Gateway::new(Arc::new(MockProvider::new(script.clone())), PriceTable::default());
    let embedder = common::embedder();
    let request = BrainstormRequest {
        user_query: "How does the runtime schedule tasks?",
        notes,
        query_log: log,
        store,
        embedder: &embedder,
        n_questions,
        k: 3,
        parallelism,
        iteration: 1,
        seed_context: None,
    };
    let outcome = brainstorm_concurrent(request, &gateway, &StageSettings::default()).await;
    (outcome, gateway)
}

#[tokio::test]
async fn three_queries_merge_in_proposal_order() {
    let store = common::store().await;
    let questions = [
        "what is work stealing",
        "how are tasks woken",
        "what is a reactor",
    ];
    let notes = Notes::new("earlier evidence");
    let (outcome, gateway) = brainstorm(&script(&questions), &store, &notes, &QueryLog::new(), 3, 3).await;
    let outcome = outcome.unwrap();
    assert_eq!(outcome.new_queries, questions);
    assert_eq!(
        outcome.notes.text(),
        "earlier evidence\n\nblock 0\n\nblock 1\n\nblock 2"
    );
    assert_eq!(
        outcome.retrievals.iter().map(|r| r.slot).collect::<Vec<_>>(),
        [0, 1, 2]
    );
    assert!(outcome
        .retrievals
        .iter()
        .all(|r| !r.chunk_ids.is_empty() && r.chunk_ids.len() <= 3));
    let ledger = gateway.ledger().snapshot();
    assert_eq!(ledger.count(RoleTag::BrainstormQuestions), 1);
    assert_eq!(ledger.count(RoleTag::BrainstormNotes), 3);
}

#[tokio::test]
async fn fully_duplicated_proposals_leave_notes_unchanged() {
    let store = common::store().await;
    let log = QueryLog::from(vec!["What is work stealing?".to_string(), "reactor".to_string()]);
    let notes = Notes::new("kept");
    let (outcome, gateway) = brainstorm(
        &script(&[
            "what is  work stealing",
            "Reactor.",
            "how does the runtime schedule tasks",
        ]),
        &store,
        &notes,
        &log,
        3,
        4,
    )
    .await;
    let outcome = outcome.unwrap();
    assert!(outcome.new_queries.is_empty());
    assert_eq!(outcome.notes, notes);
    assert_eq!(gateway.ledger().snapshot().records.len(), 1);
}

#[tokio::test]
async fn parallelism_does_not_change_output() {
    let store = common::store().await;
    let questions = ["q one", "q two", "q three", "q four", "q five"];
    let s = script(&questions);
    let (a, ga) = brainstorm(&s, &store, &Notes::default(), &QueryLog::new(), 5, 1).await;
    let (b, gb) = brainstorm(&s, &store, &Notes::default(), &QueryLog::new(), 5, 8).await;
    let (a, b) = (a.unwrap(), b.unwrap());
    assert_eq!(a.new_queries, b.new_queries);
    assert_eq!(a.notes.text().as_bytes(), b.notes.text().as_bytes());
    assert_eq!(a.retrievals, b.retrievals);
    assert_eq!(ga.ledger().snapshot().totals(), gb.ledger().snapshot().totals());
}

#[tokio::test]
async fn failed_note_call_names_the_query() {
    let store = common::store().await;
    let mut s = script(&["good query", "bad query"]);
    s.steps
        .retain(|st| !(st.role_tag == RoleTag::BrainstormNotes && st.slot == 1));
    for _ in 0..3 {
        s.steps
            .push(MockStep::text(RoleTag::BrainstormNotes, 1, 1, "not json"));
    }
    let (outcome, _) = brainstorm(&s, &store, &Notes::default(), &QueryLog::new(), 2, 2).await;
    match outcome {
        Err(StageError::NoteExtraction { query, .. }) => assert_eq!(query, "bad query"),
        other => panic!("expected note extraction error, got {other:?}"),
    }
}

#[tokio::test]
async fn empty_store_is_an_error() {
    let store = VectorStore::new(common::DIM, common::embedder().fingerprint());
    let (outcome, gateway) =
        brainstorm(&script(&["q"]), &store, &Notes::default(), &QueryLog::new(), 1, 1).await;
    assert!(matches!(outcome, Err(StageError::Store(_))));
    assert!(gateway.ledger().snapshot().records.is_empty());
}

#[tokio::test]
async fn proposals_beyond_n_questions_are_ignored() {
    let store = common::store().await;
    let (outcome, _) = brainstorm(
        &script(&["a1", "b2", "c3"]),
        &store,
        &Notes::default(),
        &QueryLog::new(),
        2,
        2,
    )
    .await;
    let outcome = outcome.unwrap();
    assert_eq!(outcome.proposed, ["a1", "b2"]);
    assert_eq!(outcome.notes.text(), "block 0\n\nblock 1");
}
