mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use rag_loop::engine::{
    run_baseline, run_bench, run_bench_queries, run_loop, BenchReport, BenchRow, EngineConfig, EngineError,
    Method, Phase, RunReport, StageEvent,
};
use rag_loop::llm::mock::Scenario;
use rag_loop::llm::{GatewayError, MockProvider, MockScript, MockStep, RoleTag};
use rag_loop::store::{StoreError, VectorStore};
use rust_decimal::Decimal;
use serde_json::json;

use common::{config, mock, ms};

const QUERY: &str = "How does the async runtime schedule work?";

async fn proposed(script: &MockScript, config: &EngineConfig) -> Result<RunReport, EngineError> {
    let store = common::store().await;
    run_loop(QUERY, &store, &common::embedder(), config, mock(script)).await
}

async fn baseline(script: &MockScript, config: &EngineConfig) -> Result<RunReport, EngineError> {
    let store = common::store().await;
    run_baseline(QUERY, &store, &common::embedder(), config, mock(script)).await
}

fn satisfied_verdicts(report: &RunReport) -> Vec<bool> {
    report
        .transcript
        .iter()
        .filter_map(|e| match e {
            StageEvent::Verdict { verdict, .. } => Some(verdict.satisfied),
            StageEvent::Judged { satisfied, .. } => Some(*satisfied),
            _ => None,
        })
        .collect()
}

fn assert_ledger_matches_transcript(report: &RunReport) {
    assert_eq!(report.ledger.records.len(), report.llm_event_count());
    let mut from_transcript: Vec<_> = report
        .transcript
        .iter()
        .filter_map(StageEvent::usage)
        .cloned()
        .collect();
    from_transcript.sort_by_key(|r| r.sequence_key());
    assert_eq!(from_transcript, report.ledger.records);
    assert_eq!(report.totals, report.ledger.totals());
}

#[tokio::test]
async fn satisfied_at_first_pass() {
    let report = proposed(&Scenario::satisfied_at(1, 5).script(), &config(5))
        .await
        .unwrap();
    assert!(report.satisfied);
    assert_eq!(report.iterations_used, 1);
    assert_eq!(report.final_hypothesis, Scenario::hypothesis(1));
    let l = &report.ledger;
    assert_eq!(l.count(RoleTag::BrainstormQuestions), 1);
    assert_eq!(l.count(RoleTag::BrainstormNotes), 5);
    assert_eq!(l.count(RoleTag::HypSat), 1);
    assert_eq!(l.count(RoleTag::Refine), 0);
    assert_eq!(l.records.len(), 7);
    assert!(matches!(report.transcript[0], StageEvent::SeedRetrieval { ref hits } if hits.len() == 5));
    assert_ledger_matches_transcript(&report);
}

#[tokio::test]
async fn satisfied_at_third_pass() {
    let report = proposed(&Scenario::satisfied_at(3, 2).script(), &config(2))
        .await
        .unwrap();
    assert!(report.satisfied);
    assert_eq!(report.iterations_used, 3);
    let l = &report.ledger;
    assert_eq!(l.count(RoleTag::HypSat), 3);
    assert_eq!(l.count(RoleTag::Refine), 2);
    assert_eq!(l.count(RoleTag::BrainstormQuestions), 3);
    assert_eq!(report.query_log.len(), 6);
    assert!(report.final_notes.starts_with(&Scenario::refined(2)));
    assert_ledger_matches_transcript(&report);
}

#[tokio::test]
async fn iteration_cap_skips_last_refine() {
    let cfg = EngineConfig {
        max_iterations: 4,
        ..config(2)
    };
    let report = proposed(&Scenario::never_satisfied(4, 2).script(), &cfg)
        .await
        .unwrap();
    assert!(!report.satisfied);
    assert_eq!(report.iterations_used, 4);
    assert_eq!(report.ledger.count(RoleTag::HypSat), 4);
    assert_eq!(report.ledger.count(RoleTag::Refine), 3);
    assert_eq!(report.final_feedback, Scenario::feedback(4));
    assert!(matches!(
        report.transcript.last(),
        Some(StageEvent::IterationCapReached { iteration: 4 })
    ));
    assert_ledger_matches_transcript(&report);
}

#[tokio::test]
async fn refine_count_law() {
    for (script, cap) in [
        (Scenario::satisfied_at(1, 1).script(), 5),
        (Scenario::satisfied_at(4, 1).script(), 5),
        (Scenario::never_satisfied(3, 1).script(), 3),
        (Scenario::never_satisfied(1, 1).script(), 1),
    ] {
        let cfg = EngineConfig {
            max_iterations: cap,
            ..config(1)
        };
        let report = proposed(&script, &cfg).await.unwrap();
        let unsatisfied = satisfied_verdicts(&report).iter().filter(|s| !**s).count();
        let capped = usize::from(!report.satisfied);
        assert_eq!(report.ledger.count(RoleTag::Refine), unsatisfied - capped);
        assert!(report.iterations_used <= cap);
    }
}

#[tokio::test]
async fn final_refine_rewrites_hypothesis() {
    let mut script = Scenario::satisfied_at(1, 1).script();
    script
        .steps
        .push(MockStep::text(RoleTag::Refine, 1, 1, "terse answer"));
    let cfg = EngineConfig {
        final_refine: true,
        ..config(1)
    };
    let report = proposed(&script, &cfg).await.unwrap();
    assert_eq!(report.final_hypothesis, "terse answer");
    assert_eq!(report.ledger.count(RoleTag::Refine), 1);
    assert!(matches!(
        report.transcript.last(),
        Some(StageEvent::FinalRefined { .. })
    ));
}

#[tokio::test]
async fn empty_store_fails_before_any_call() {
    let store = VectorStore::new(common::DIM, common::embedder().fingerprint());
    let provider = Arc::new(MockProvider::new(Scenario::satisfied_at(1, 1).script()));
    let err = run_loop(QUERY, &store, &common::embedder(), &config(1), provider.clone())
        .await
        .unwrap_err();
    assert!(matches!(err, EngineError::Store(StoreError::Empty)));
    assert!(provider.requests().is_empty());
}

#[tokio::test]
async fn fingerprint_mismatch_fails_before_any_call() {
    let store = common::store().await;
    let provider = Arc::new(MockProvider::new(Scenario::satisfied_at(1, 1).script()));
    let other = rag_loop::embedding::Embedder::local(common::DIM, 7);
    let err = run_loop(QUERY, &store, &other, &config(1), provider.clone())
        .await
        .unwrap_err();
    assert!(matches!(err, EngineError::Store(StoreError::Fingerprint { .. })));
    assert!(provider.requests().is_empty());
}

#[tokio::test]
async fn stage_errors_carry_iteration() {
    let mut script = Scenario::satisfied_at(2, 1).script();
    script
        .steps
        .retain(|s| !(s.role_tag == RoleTag::HypSat && s.iteration == 2));
    let err = proposed(&script, &config(1)).await.unwrap_err();
    assert!(matches!(err, EngineError::Stage { iteration: 2, .. }));
    assert!(matches!(err.gateway_error(), Some(GatewayError::Script(_))));
}

#[tokio::test]
async fn invalid_config_rejected() {
    let cfg = EngineConfig {
        max_iterations: 0,
        ..config(1)
    };
    let err = proposed(&Scenario::satisfied_at(1, 1).script(), &cfg)
        .await
        .unwrap_err();
    assert!(matches!(err, EngineError::Config(_)));
    let err = run_loop(
        "  ",
        &common::store().await,
        &common::embedder(),
        &config(1),
        mock(&Scenario::satisfied_at(1, 1).script()),
    )
    .await
    .unwrap_err();
    assert!(matches!(err, EngineError::EmptyQuery));
}

#[tokio::test]
async fn baseline_is_sequential_and_two_call() {
    let report = baseline(&common::timing_scenario().script(), &config(5))
        .await
        .unwrap();
    assert!(report.satisfied);
    assert!(report.phase_time(1, Phase::NoteExtraction) >= ms(1000));
    assert_eq!(report.ledger.count(RoleTag::BaselineHypothesize), 1);
    assert_eq!(report.ledger.count(RoleTag::BaselineSatisfy), 1);
    assert_eq!(report.ledger.count(RoleTag::HypSat), 0);
    assert!(!report
        .transcript
        .iter()
        .any(|e| matches!(e, StageEvent::SeedRetrieval { .. })));
    assert_ledger_matches_transcript(&report);
}

#[tokio::test]
async fn baseline_has_two_verdict_calls_per_iteration() {
    let report = baseline(&Scenario::satisfied_at(3, 1).script(), &config(1))
        .await
        .unwrap();
    for it in 1..=3 {
        let n = report
            .ledger
            .records
            .iter()
            .filter(|r| r.iteration == it)
            .filter(|r| {
                matches!(
                    r.role_tag,
                    RoleTag::BaselineHypothesize | RoleTag::BaselineSatisfy
                )
            })
            .count();
        assert_eq!(n, 2);
    }
}

/// With one question and an immediately satisfied verdict, the two arms
/// differ only by the seed retrieval and the split verdict.
#[tokio::test]
async fn baseline_transcript_diff() {
    let script = Scenario::satisfied_at(1, 1).script();
    let p = proposed(&script, &config(1)).await.unwrap().without_timings();
    let b = baseline(&script, &config(1)).await.unwrap().without_timings();
    let shared = |r: &RunReport| -> Vec<StageEvent> {
        r.transcript
            .iter()
            .filter(|e| {
                !matches!(
                    e,
                    StageEvent::SeedRetrieval { .. }
                        | StageEvent::Verdict { .. }
                        | StageEvent::Hypothesized { .. }
                        | StageEvent::Judged { .. }
                )
            })
            .cloned()
            .collect()
    };
    assert_eq!(shared(&p), shared(&b));
    assert_eq!(p.transcript.len() - shared(&p).len(), 2);
    assert_eq!(b.transcript.len() - shared(&b).len(), 2);
    assert_eq!(b.ledger.records.len(), p.ledger.records.len() + 1);
    assert_eq!(p.final_hypothesis, b.final_hypothesis);
    assert_eq!(p.final_notes, b.final_notes);
}

#[tokio::test]
async fn determinism_excluding_wall_clock() {
    let script = Scenario::satisfied_at(3, 4).script();
    let a = proposed(&script, &config(4)).await.unwrap().without_timings();
    let b = proposed(&script, &config(4)).await.unwrap().without_timings();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[tokio::test]
async fn report_round_trips_through_json() {
    let report = proposed(&Scenario::satisfied_at(2, 2).script(), &config(2))
        .await
        .unwrap();
    let json = serde_json::to_string(&report).unwrap();
    let back: RunReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[tokio::test]
async fn bench_cost_reduction_positive() {
    let store = common::store().await;
    let script = Scenario::satisfied_at(2, 3).script();
    let report = run_bench(
        QUERY,
        &store,
        &common::embedder(),
        &config(3),
        mock(&script),
        mock(&script),
    )
    .await
    .unwrap();
    assert_eq!(report.rows[0].method, Method::Baseline);
    assert_eq!(report.rows[1].method, Method::Proposed);
    assert!(report.relative_cost_reduction > 0.0);
    assert_eq!(report.runs.len(), 2);
}

#[tokio::test]
async fn bench_error_names_the_arm() {
    let store = common::store().await;
    let good = Scenario::satisfied_at(1, 1).script();
    let mut bad = good.clone();
    bad.steps.retain(|s| s.role_tag != RoleTag::HypSat);
    let err = run_bench(
        QUERY,
        &store,
        &common::embedder(),
        &config(1),
        mock(&good),
        mock(&bad),
    )
    .await
    .unwrap_err();
    assert!(matches!(
        err,
        EngineError::Bench {
            arm: Method::Proposed,
            ..
        }
    ));
    assert!(err.to_string().starts_with("proposed arm failed"));
}

#[tokio::test]
async fn bench_averages_over_queries() {
    let store = common::store().await;
    let script = Scenario::satisfied_at(1, 2).script();
    let queries = ["first question", "second question", "third question"];
    let single = run_bench_queries(&queries[..1], &store, &common::embedder(), &config(2), |_| {
        mock(&script)
    })
    .await
    .unwrap();
    let many = run_bench_queries(&queries, &store, &common::embedder(), &config(2), |_| {
        mock(&script)
    })
    .await
    .unwrap();
    assert_eq!(many.queries, 3);
    assert_eq!(many.runs.len(), 6);
    // identical scripts per query, so the mean cost equals one query's cost
    assert_eq!(many.rows[0].cost, single.rows[0].cost);
    assert_eq!(many.rows[1].cost, single.rows[1].cost);
}

#[test]
fn table_renders_fixture() {
    let report = BenchReport::from_rows(
        BenchRow {
            method: Method::Baseline,
            satisfied: true,
            cost: Decimal::new(527, 5),
            delay: Duration::from_secs_f64(24.31),
        },
        BenchRow {
            method: Method::Proposed,
            satisfied: true,
            cost: Decimal::new(355, 5),
            delay: Duration::from_secs_f64(10.21),
        },
    );
    let table = report.render_table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "Method    Information Need  Cost ($)  Delay (seconds)");
    assert_eq!(lines[2], "baseline  satisfied         0.00527   24.31");
    assert_eq!(lines[3], "proposed  satisfied         0.00355   10.21");
    assert_eq!(lines[4], "Relative cost reduction:  32.64%");
    assert_eq!(lines[5], "Relative delay reduction: 58.00%");
}

#[tokio::test]
async fn concurrent_runs_share_a_store() {
    let store = Arc::new(common::store().await);
    let script = Scenario::satisfied_at(1, 3)
        .latencies(ms(50), ms(50), ms(50), ms(50))
        .script();
    let started = Instant::now();
    let handles: Vec<_> = (0..4)
        .map(|i| {
            let store = store.clone();
            let script = script.clone();
            tokio::spawn(async move {
                let q = format!("{QUERY} #{i}");
                run_loop(&q, &store, &common::embedder(), &config(3), mock(&script)).await
            })
        })
        .collect();
    for h in handles {
        assert!(h.await.unwrap().unwrap().satisfied);
    }
    assert!(started.elapsed() < ms(1000));
}

#[tokio::test]
async fn malformed_script_json_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("script.json");
    std::fs::write(
        &path,
        json!({"steps": [{"role_tag": "nope", "iteration": 1}]}).to_string(),
    )
    .unwrap();
    assert!(MockScript::load(&path).is_err());
}
