//! Loop controller: the proposed concurrent/hybrid loop, the sequential
//! baseline, and the head-to-head bench.
//!
//! Proposed loop, per pass: brainstorm (concurrent note extraction), one
//! hypothesize-satisfy call, stop if satisfied, otherwise refine the notes.
//! Before the first pass the user query itself is retrieved and reranked,
//! and those passages seed the first question proposal.
//!
//! The baseline runs the same passes without the seed retrieval, with note
//! extraction strictly one query at a time, and with the verdict split into a
//! hypothesize call followed by a satisfy call.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rust_decimal::prelude::ToPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, Embedder};
use crate::llm::{
    duration_secs, ChatProvider, CostLedger, Gateway, GatewayError, LedgerTotals, PriceTable, RoleTag,
    UsageRecord, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE,
};
use crate::stages::{
    self, BrainstormRequest, HypSatRequest, Notes, PromptSet, QueryLog, StageError, StageSettings, Verdict,
};
use crate::store::{SearchHit, StoreError, VectorStore};

pub const DEFAULT_MAX_ITERATIONS: u32 = 5;
pub const DEFAULT_N_QUESTIONS: usize = 5;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Proposed,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Proposed => "proposed",
        })
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("user query is empty")]
    EmptyQuery,
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("seed retrieval: {0}")]
    Embed(#[from] EmbedError),
    #[error("iteration {iteration}: {source}")]
    Stage {
        iteration: u32,
        #[source]
        source: StageError,
    },
    #[error("{arm} arm failed: {source}")]
    Bench {
        arm: Method,
        #[source]
        source: Box<EngineError>,
    },
}

impl EngineError {
    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            EngineError::Stage { source, .. } => source.gateway_error(),
            EngineError::Bench { source, .. } => source.gateway_error(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub max_iterations: u32,
    pub n_questions: usize,
    pub k: usize,
    /// Note-extraction tasks in flight at once; defaults to `n_questions`.
    pub parallelism: Option<usize>,
    /// Refine the hypothesis once more after a satisfied exit.
    pub final_refine: bool,
    pub temperature: f64,
    pub max_tokens: u32,
    pub prices: PriceTable,
    /// Recorded in reports. Nothing in the loop is random; the local
    /// embedder's seed lives in the embedder configuration.
    pub seed: u64,
    pub prompts: Arc<PromptSet>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            n_questions: DEFAULT_N_QUESTIONS,
            k: DEFAULT_K,
            parallelism: None,
            final_refine: false,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            prices: PriceTable::default(),
            seed: 0,
            prompts: Arc::new(PromptSet::builtin()),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |msg: &str| Err(EngineError::Config(msg.to_string()));
        if self.max_iterations < 1 {
            return bad("max_iterations must be >= 1");
        }
        if self.n_questions < 1 {
            return bad("n_questions must be >= 1");
        }
        if self.k < 1 {
            return bad("k must be >= 1");
        }
        if self.parallelism == Some(0) {
            return bad("parallelism must be >= 1");
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be > 0");
        }
        Ok(())
    }

    pub fn effective_parallelism(&self) -> usize {
        self.parallelism.unwrap_or(self.n_questions)
    }

    fn settings(&self) -> StageSettings {
        StageSettings {
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            prompts: self.prompts.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitSummary {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
}

impl From<&SearchHit> for HitSummary {
    fn from(hit: &SearchHit) -> Self {
        Self {
            chunk_id: hit.chunk.chunk_id.clone(),
            score: hit.score,
            rank: hit.rank,
        }
    }
}

/// One step of a run, in execution order. Events that carry `usage` are the
/// model calls; there is exactly one per ledger record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum StageEvent {
    SeedRetrieval {
        hits: Vec<HitSummary>,
    },
    QuestionsProposed {
        iteration: u32,
        proposed: Vec<String>,
        accepted: Vec<String>,
        usage: UsageRecord,
    },
    NotesExtracted {
        iteration: u32,
        slot: u32,
        query: String,
        chunk_ids: Vec<String>,
        note: String,
        usage: UsageRecord,
    },
    Verdict {
        iteration: u32,
        verdict: Verdict,
        usage: UsageRecord,
    },
    Hypothesized {
        iteration: u32,
        reasoning: String,
        hypothesis: String,
        usage: UsageRecord,
    },
    Judged {
        iteration: u32,
        satisfied: bool,
        feedback: String,
        usage: UsageRecord,
    },
    Refined {
        iteration: u32,
        input_chars: usize,
        output_chars: usize,
        compression_ratio: f64,
        usage: UsageRecord,
    },
    RefineSkipped {
        iteration: u32,
        reason: String,
    },
    FinalRefined {
        iteration: u32,
        input_chars: usize,
        output_chars: usize,
        compression_ratio: f64,
        usage: UsageRecord,
    },
    IterationCapReached {
        iteration: u32,
    },
}

impl StageEvent {
    pub fn usage(&self) -> Option<&UsageRecord> {
        match self {
            StageEvent::QuestionsProposed { usage, .. }
            | StageEvent::NotesExtracted { usage, .. }
            | StageEvent::Verdict { usage, .. }
            | StageEvent::Hypothesized { usage, .. }
            | StageEvent::Judged { usage, .. }
            | StageEvent::Refined { usage, .. }
            | StageEvent::FinalRefined { usage, .. } => Some(usage),
            _ => None,
        }
    }

    fn usage_mut(&mut self) -> Option<&mut UsageRecord> {
        match self {
            StageEvent::QuestionsProposed { usage, .. }
            | StageEvent::NotesExtracted { usage, .. }
            | StageEvent::Verdict { usage, .. }
            | StageEvent::Hypothesized { usage, .. }
            | StageEvent::Judged { usage, .. }
            | StageEvent::Refined { usage, .. }
            | StageEvent::FinalRefined { usage, .. } => Some(usage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    SeedRetrieval,
    QuestionProposal,
    NoteExtraction,
    Verdict,
    Refine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub iteration: u32,
    pub phase: Phase,
    #[serde(with = "duration_secs")]
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub user_query: String,
    pub final_hypothesis: String,
    /// Feedback from the last verdict; explains a capped, unsatisfied exit.
    pub final_feedback: String,
    pub final_notes: String,
    pub satisfied: bool,
    pub iterations_used: u32,
    pub max_iterations: u32,
    pub query_log: Vec<String>,
    pub ledger: CostLedger,
    pub totals: LedgerTotals,
    #[serde(with = "duration_secs")]
    pub total_wall_clock: Duration,
    pub phase_timings: Vec<PhaseTiming>,
    pub transcript: Vec<StageEvent>,
    pub prompt_version: String,
    pub provider: String,
    pub seed: u64,
}

impl RunReport {
    pub fn llm_event_count(&self) -> usize {
        self.transcript.iter().filter(|e| e.usage().is_some()).count()
    }

    pub fn phase_time(&self, iteration: u32, phase: Phase) -> Duration {
        self.phase_timings
            .iter()
            .filter(|t| t.iteration == iteration && t.phase == phase)
            .map(|t| t.wall_clock)
            .sum()
    }

    /// Copy with every wall-clock field zeroed, for comparing runs.
    pub fn without_timings(&self) -> RunReport {
        let mut report = self.clone();
        report.total_wall_clock = Duration::ZERO;
        report
            .phase_timings
            .iter_mut()
            .for_each(|t| t.wall_clock = Duration::ZERO);
        report
            .ledger
            .records
            .iter_mut()
            .for_each(|r| r.wall_clock = Duration::ZERO);
        for event in &mut report.transcript {
            if let Some(usage) = event.usage_mut() {
                usage.wall_clock = Duration::ZERO;
            }
        }
        report
    }
}

struct LoopState {
    iteration: u32,
    notes: Notes,
    query_log: QueryLog,
    last_verdict: Option<Verdict>,
    satisfied: bool,
}

pub async fn run_loop(
    user_query: &str,
    store: &VectorStore,
    embedder: &Embedder,
    config: &EngineConfig,
    provider: Arc<dyn ChatProvider>,
) -> Result<RunReport, EngineError> {
    run(Method::Proposed, user_query, store, embedder, config, provider).await
}

pub async fn run_baseline(
    user_query: &str,
    store: &VectorStore,
    embedder: &Embedder,
    config: &EngineConfig,
    provider: Arc<dyn ChatProvider>,
) -> Result<RunReport, EngineError> {
    run(Method::Baseline, user_query, store, embedder, config, provider).await
}

async fn run(
    method: Method,
    user_query: &str,
    store: &VectorStore,
    embedder: &Embedder,
    config: &EngineConfig,
    provider: Arc<dyn ChatProvider>,
) -> Result<RunReport, EngineError> {
    config.validate()?;
    if user_query.trim().is_empty() {
        return Err(EngineError::EmptyQuery);
    }
    if store.is_empty() {
        return Err(StoreError::Empty.into());
    }
    store.check_fingerprint(&embedder.fingerprint())?;

    let settings = config.settings();
    let gateway = Gateway::new(provider, config.prices);
    let started = Instant::now();
    let mut transcript = Vec::new();
    let mut timings = Vec::new();

    let seed_hits = match method {
        Method::Proposed => {
            let t = Instant::now();
            let query_embedding = embedder.embed_text(user_query).await?;
            let hits = store.retrieve(&query_embedding, &query_embedding, config.k)?;
            transcript.push(StageEvent::SeedRetrieval {
                hits: hits.iter().map(HitSummary::from).collect(),
            });
            record(&mut timings, 0, Phase::SeedRetrieval, t.elapsed());
            Some(hits)
        }
        Method::Baseline => None,
    };
    let parallelism = match method {
        Method::Proposed => config.effective_parallelism(),
        Method::Baseline => 1,
    };

    let mut state = LoopState {
        iteration: 0,
        notes: Notes::default(),
        query_log: QueryLog::new(),
        last_verdict: None,
        satisfied: false,
    };

    loop {
        state.iteration += 1;
        let iteration = state.iteration;
        let stage_err = |source| EngineError::Stage { iteration, source };

        let t = Instant::now();
        let brainstorm = stages::brainstorm_concurrent(
            BrainstormRequest {
                user_query,
                notes: &state.notes,
                query_log: &state.query_log,
                store,
                embedder,
                n_questions: config.n_questions,
                k: config.k,
                parallelism,
                iteration,
                seed_context: if iteration == 1 {
                    seed_hits.as_deref()
                } else {
                    None
                },
            },
            &gateway,
            &settings,
        )
        .await
        .map_err(stage_err)?;
        let proposal = t.elapsed().saturating_sub(brainstorm.note_phase);
        record(&mut timings, iteration, Phase::QuestionProposal, proposal);
        record(
            &mut timings,
            iteration,
            Phase::NoteExtraction,
            brainstorm.note_phase,
        );

        transcript.push(StageEvent::QuestionsProposed {
            iteration,
            proposed: brainstorm.proposed.clone(),
            accepted: brainstorm.new_queries.clone(),
            usage: brainstorm.usage[0].clone(),
        });
        for (retrieval, usage) in brainstorm.retrievals.iter().zip(&brainstorm.usage[1..]) {
            transcript.push(StageEvent::NotesExtracted {
                iteration,
                slot: retrieval.slot,
                query: retrieval.query.clone(),
                chunk_ids: retrieval.chunk_ids.clone(),
                note: retrieval.note.clone(),
                usage: usage.clone(),
            });
        }
        state.query_log.extend(brainstorm.new_queries);
        state.notes = brainstorm.notes;

        let t = Instant::now();
        let request = HypSatRequest {
            user_query,
            notes: &state.notes,
            query_log: &state.query_log,
            iteration,
        };
        let verdict = match method {
            Method::Proposed => {
                let (verdict, usage) = stages::hypothesize_satisfy(request, &gateway, &settings)
                    .await
                    .map_err(stage_err)?;
                transcript.push(StageEvent::Verdict {
                    iteration,
                    verdict: verdict.clone(),
                    usage,
                });
                verdict
            }
            Method::Baseline => {
                let ((reasoning, hypothesis), usage) =
                    stages::baseline_hypothesize(request, &gateway, &settings)
                        .await
                        .map_err(stage_err)?;
                transcript.push(StageEvent::Hypothesized {
                    iteration,
                    reasoning: reasoning.clone(),
                    hypothesis: hypothesis.clone(),
                    usage,
                });
                let (verdict, usage) =
                    stages::baseline_satisfy(request, reasoning, hypothesis, &gateway, &settings)
                        .await
                        .map_err(stage_err)?;
                transcript.push(StageEvent::Judged {
                    iteration,
                    satisfied: verdict.satisfied,
                    feedback: verdict.feedback.clone(),
                    usage,
                });
                verdict
            }
        };
        record(&mut timings, iteration, Phase::Verdict, t.elapsed());
        state.satisfied = verdict.satisfied;
        state.last_verdict = Some(verdict);

        if state.satisfied {
            break;
        }
        if iteration >= config.max_iterations {
            transcript.push(StageEvent::IterationCapReached { iteration });
            break;
        }
        if state.notes.is_empty() {
            transcript.push(StageEvent::RefineSkipped {
                iteration,
                reason: "no notes to refine".into(),
            });
            continue;
        }
        let t = Instant::now();
        let refined = stages::refine_notes(&state.notes, user_query, iteration, &gateway, &settings)
            .await
            .map_err(stage_err)?;
        record(&mut timings, iteration, Phase::Refine, t.elapsed());
        transcript.push(StageEvent::Refined {
            iteration,
            input_chars: refined.input_chars,
            output_chars: refined.output_chars,
            compression_ratio: refined.compression_ratio,
            usage: refined.usage,
        });
        state.notes = refined.notes;
    }

    let verdict = state.last_verdict.expect("at least one pass ran");
    let mut final_hypothesis = verdict.hypothesis.clone();
    if state.satisfied && config.final_refine {
        let iteration = state.iteration;
        let t = Instant::now();
        let refined = stages::refine_text(&final_hypothesis, user_query, iteration, 1, &gateway, &settings)
            .await
            .map_err(|source| EngineError::Stage { iteration, source })?;
        record(&mut timings, iteration, Phase::Refine, t.elapsed());
        transcript.push(StageEvent::FinalRefined {
            iteration,
            input_chars: refined.input_chars,
            output_chars: refined.output_chars,
            compression_ratio: refined.compression_ratio,
            usage: refined.usage,
        });
        final_hypothesis = refined.notes.text().to_string();
    }

    let ledger = gateway.ledger().snapshot();
    Ok(RunReport {
        method,
        user_query: user_query.to_string(),
        final_hypothesis,
        final_feedback: verdict.feedback,
        final_notes: state.notes.text().to_string(),
        satisfied: state.satisfied,
        iterations_used: state.iteration,
        max_iterations: config.max_iterations,
        query_log: state.query_log.entries().to_vec(),
        totals: ledger.totals(),
        ledger,
        total_wall_clock: started.elapsed(),
        phase_timings: timings,
        transcript,
        prompt_version: config.prompts.version.clone(),
        provider: gateway.provider_name().to_string(),
        seed: config.seed,
    })
}

fn record(timings: &mut Vec<PhaseTiming>, iteration: u32, phase: Phase, wall_clock: Duration) {
    timings.push(PhaseTiming {
        iteration,
        phase,
        wall_clock,
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub satisfied: bool,
    #[serde(with = "rust_decimal::serde::str")]
    pub cost: Decimal,
    #[serde(with = "duration_secs")]
    pub delay: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// `(baseline - proposed) / baseline`, as a fraction.
    pub relative_cost_reduction: f64,
    pub relative_delay_reduction: f64,
    /// Queries averaged into each row.
    #[serde(default = "one")]
    pub queries: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<RunReport>,
}

fn one() -> usize {
    1
}

impl BenchReport {
    pub fn from_rows(baseline: BenchRow, proposed: BenchRow) -> Self {
        let relative_cost_reduction = if baseline.cost.is_zero() {
            0.0
        } else {
            ((baseline.cost - proposed.cost) / baseline.cost)
                .to_f64()
                .unwrap_or(0.0)
        };
        let b = baseline.delay.as_secs_f64();
        let relative_delay_reduction = if b == 0.0 {
            0.0
        } else {
            (b - proposed.delay.as_secs_f64()) / b
        };
        Self {
            rows: vec![baseline, proposed],
            relative_cost_reduction,
            relative_delay_reduction,
            queries: 1,
            runs: Vec::new(),
        }
    }

    pub fn row(&self, method: Method) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Aligned text table: Method, Information Need, Cost ($), Delay (seconds),
    /// followed by the two relative reductions.
    pub fn render_table(&self) -> String {
        let header = ["Method", "Information Need", "Cost ($)", "Delay (seconds)"];
        let rows: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.to_string(),
                    if r.satisfied { "satisfied" } else { "not satisfied" }.to_string(),
                    r.cost.normalize().to_string(),
                    format!("{:.2}", r.delay.as_secs_f64()),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.len());
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: [&str; 4]| {
            cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = String::new();
        let _ = writeln!(out, "{}", line(header));
        let _ = writeln!(
            out,
            "{}",
            line(widths.map(|w| "-".repeat(w)).each_ref().map(String::as_str))
        );
        for row in &rows {
            let _ = writeln!(out, "{}", line(row.each_ref().map(String::as_str)));
        }
        let _ = writeln!(
            out,
            "Relative cost reduction:  {:.2}%",
            self.relative_cost_reduction * 100.0
        );
        let _ = writeln!(
            out,
            "Relative delay reduction: {:.2}%",
            self.relative_delay_reduction * 100.0
        );
        out
    }
}

/// Mean cost and delay over `runs`; satisfied only if every run was.
fn bench_row(method: Method, runs: &[RunReport]) -> BenchRow {
    let n = runs.len().max(1) as u32;
    BenchRow {
        method,
        satisfied: runs.iter().all(|r| r.satisfied),
        cost: runs.iter().map(|r| r.totals.total_cost).sum::<Decimal>() / Decimal::from(n),
        delay: runs.iter().map(|r| r.total_wall_clock).sum::<Duration>() / n,
    }
}

/// Runs the baseline, then the proposed loop, each against its own provider.
pub async fn run_bench(
    user_query: &str,
    store: &VectorStore,
    embedder: &Embedder,
    config: &EngineConfig,
    baseline_provider: Arc<dyn ChatProvider>,
    proposed_provider: Arc<dyn ChatProvider>,
) -> Result<BenchReport, EngineError> {
    let pick = |method| match method {
        Method::Baseline => baseline_provider.clone(),
        Method::Proposed => proposed_provider.clone(),
    };
    run_bench_queries(&[user_query], store, embedder, config, pick).await
}

/// Benches every query in turn (baseline first, then proposed) and reports
/// the per-query mean cost and delay of each arm. `provider_for` is called
/// once per run.
pub async fn run_bench_queries<Q, F>(
    queries: &[Q],
    store: &VectorStore,
    embedder: &Embedder,
    config: &EngineConfig,
    provider_for: F,
) -> Result<BenchReport, EngineError>
where
    Q: AsRef<str>,
    F: Fn(Method) -> Arc<dyn ChatProvider>,
{
    if queries.is_empty() {
        return Err(EngineError::EmptyQuery);
    }
    let arm = |arm| {
        move |e| EngineError::Bench {
            arm,
            source: Box::new(e),
        }
    };
    let mut baseline = Vec::with_capacity(queries.len());
    let mut proposed = Vec::with_capacity(queries.len());
    for query in queries {
        let query = query.as_ref();
        let provider = provider_for(Method::Baseline);
        baseline.push(
            run_baseline(query, store, embedder, config, provider)
                .await
                .map_err(arm(Method::Baseline))?,
        );
        let provider = provider_for(Method::Proposed);
        proposed.push(
            run_loop(query, store, embedder, config, provider)
                .await
                .map_err(arm(Method::Proposed))?,
        );
    }
    let mut report = BenchReport::from_rows(
        bench_row(Method::Baseline, &baseline),
        bench_row(Method::Proposed, &proposed),
    );
    report.queries = queries.len();
    report.runs = baseline.into_iter().chain(proposed).collect();
    Ok(report)
}

/// Calls attributed to the verdict phase for `method`.
pub fn verdict_roles(method: Method) -> &'static [RoleTag] {
    match method {
        Method::Proposed => &[RoleTag::HypSat],
        Method::Baseline => &[RoleTag::BaselineHypothesize, RoleTag::BaselineSatisfy],
    }
}
