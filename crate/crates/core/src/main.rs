use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rag_loop::config::{FileConfig, ProviderKind};
use rag_loop::embedding::{Embedder, EmbedderConfig, EmbedderKind};
use rag_loop::engine::{self, EngineConfig, EngineError};
use rag_loop::index::{self, IndexError};
use rag_loop::ingest::{ChunkConfig, IngestError};
use rag_loop::llm::mock::Scenario;
use rag_loop::llm::{ChatProvider, HttpProvider, HttpProviderConfig, MockProvider, MockScript};
use rag_loop::stages::PromptSet;
use rag_loop::store::{VectorStore, FORMAT_VERSION};
use rag_loop::transport;

const EXIT_RUNTIME: u8 = 2;
const EXIT_USAGE: u8 = 1;
const EXIT_NOT_SATISFIED: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "rag-loop",
    version,
    about = "Iterative retrieve / brainstorm / hypothesize loop"
)]
struct Cli {
    /// TOML configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Chunk, embed and store documents (.txt/.md files or directories)
    Ingest(IngestArgs),
    /// Answer a query with the proposed loop (or the baseline)
    Ask(AskArgs),
    /// Run baseline and proposed loops on one query and compare them
    Bench(BenchArgs),
    /// Print store metadata as JSON
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    overlap: Option<usize>,
    /// Local embedder dimension for a new store
    #[arg(long)]
    dim: Option<usize>,
    /// Local embedder seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    query: String,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, value_enum)]
    provider: Option<ProviderKind>,
    /// JSON mock script; without one the mock serves a built-in demo scenario
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_questions: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    max_iters: Option<u32>,
    #[arg(long)]
    final_refine: bool,
    /// Run seed; also the local embedder seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prompts_dir: Option<PathBuf>,
    /// Write the full JSON report here
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AskArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Use the sequential two-call baseline instead
    #[arg(long)]
    baseline: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// More queries; each row then reports the per-query mean
    #[arg(long = "also")]
    more: Vec<String>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    store: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::EmptyQuery => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Ingest(IngestError::Config { .. }) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli).await {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

async fn run(cli: Cli) -> Result<ExitCode, CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Ingest(args) => ingest(file, args).await,
        Command::Ask(args) => ask(file, args).await,
        Command::Bench(args) => bench(file, args).await,
        Command::Inspect(args) => inspect(args),
    }
}

async fn ingest(file: FileConfig, args: IngestArgs) -> Result<ExitCode, CliError> {
    let chunking = ChunkConfig::new(
        args.chunk_size.unwrap_or(file.ingest.chunk_size),
        args.overlap.unwrap_or(file.ingest.overlap),
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut embedder_config = file.embedder.clone();
    if let Some(dim) = args.dim {
        embedder_config.dim = dim;
    }
    if let Some(seed) = args.seed {
        embedder_config.seed = seed;
    }
    let embedder = build_embedder(embedder_config)?;

    let mut store = if args.store.exists() {
        VectorStore::load(&args.store).map_err(CliError::runtime)?
    } else {
        VectorStore::new(embedder.config().dim, embedder.fingerprint())
    };
    let summary = index::index_paths(&mut store, &args.paths, chunking, &embedder).await?;
    store.save(&args.store).map_err(CliError::runtime)?;
    eprintln!(
        "indexed {} documents, {} chunks ({} blank skipped); store now holds {} chunks",
        summary.documents,
        summary.chunks,
        summary.skipped,
        store.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn set<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

fn build_embedder(config: EmbedderConfig) -> Result<Embedder, CliError> {
    let embedder = Embedder::new(config).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(embedder.with_api_key(transport::api_key_from_env()))
}

struct Prepared {
    store: VectorStore,
    embedder: Embedder,
    engine: EngineConfig,
    provider: ProviderKind,
    http: HttpProviderConfig,
    script: Option<MockScript>,
}

fn prepare(mut file: FileConfig, args: &RunArgs) -> Result<Prepared, CliError> {
    if let Some(dir) = &args.prompts_dir {
        file.engine.prompts_dir = Some(dir.clone());
    }
    let mut engine = file.engine_config().map_err(|e| CliError::Usage(e.to_string()))?;
    set(&mut engine.temperature, args.temperature);
    set(&mut engine.max_tokens, args.max_tokens);
    set(&mut engine.k, args.k);
    set(&mut engine.n_questions, args.n_questions);
    set(&mut engine.max_iterations, args.max_iters);
    set(&mut engine.seed, args.seed);
    if args.parallelism.is_some() {
        engine.parallelism = args.parallelism;
    }
    engine.final_refine |= args.final_refine;
    engine.validate()?;

    let store = VectorStore::load(&args.store).map_err(CliError::runtime)?;
    let mut embedder_config = file.embedder.clone();
    if embedder_config.kind == EmbedderKind::LocalHash {
        embedder_config.dim = store.dim();
    }
    set(&mut embedder_config.seed, args.seed);
    let embedder = build_embedder(embedder_config)?;

    let provider = args.provider.unwrap_or(file.llm.provider);
    let script = match provider {
        ProviderKind::Http => None,
        ProviderKind::Mock => Some(
            match args.mock_script.as_ref().or(file.llm.mock_script.as_ref()) {
                Some(path) => MockScript::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
                None => demo_script(engine.n_questions),
            },
        ),
    };
    let http = HttpProviderConfig::from_env(
        args.base_url.clone().unwrap_or(file.llm.base_url.clone()),
        args.model.clone().unwrap_or(file.llm.model.clone()),
    );
    Ok(Prepared {
        store,
        embedder,
        engine,
        provider,
        http,
        script,
    })
}

/// Satisfied on the second pass, with latencies that make the concurrency
/// visible in `bench`.
fn demo_script(n_questions: usize) -> MockScript {
    let ms = Duration::from_millis;
    Scenario::satisfied_at(2, n_questions as u32)
        .latencies(ms(100), ms(200), ms(100), ms(100))
        .script()
}

impl Prepared {
    fn provider(&self) -> Arc<dyn ChatProvider> {
        match &self.script {
            Some(script) => Arc::new(MockProvider::new(script.clone())),
            None => {
                debug_assert_eq!(self.provider, ProviderKind::Http);
                Arc::new(HttpProvider::new(self.http.clone()))
            }
        }
    }
}

fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report).map_err(CliError::runtime)?;
    std::fs::write(path, json + "\n")
        .map_err(|e| CliError::Runtime(format!("cannot write report {}: {e}", path.display())))
}

async fn ask(file: FileConfig, args: AskArgs) -> Result<ExitCode, CliError> {
    let p = prepare(file, &args.run)?;
    let provider = p.provider();
    let report = if args.baseline {
        engine::run_baseline(&args.run.query, &p.store, &p.embedder, &p.engine, provider).await?
    } else {
        engine::run_loop(&args.run.query, &p.store, &p.embedder, &p.engine, provider).await?
    };
    if let Some(path) = &args.run.report {
        write_report(path, &report)?;
    }
    println!("{}", report.final_hypothesis);
    eprintln!(
        "{} iteration(s), {} model calls, cost ${}, {:.2}s",
        report.iterations_used,
        report.ledger.records.len(),
        report.totals.total_cost,
        report.total_wall_clock.as_secs_f64()
    );
    if report.satisfied {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "information need not satisfied after {} iterations: {}",
            report.iterations_used, report.final_feedback
        );
        Ok(ExitCode::from(EXIT_NOT_SATISFIED))
    }
}

async fn bench(file: FileConfig, args: BenchArgs) -> Result<ExitCode, CliError> {
    let p = prepare(file, &args.run)?;
    let mut queries = vec![args.run.query.clone()];
    queries.extend(args.more);
    let report =
        engine::run_bench_queries(&queries, &p.store, &p.embedder, &p.engine, |_| p.provider()).await?;
    if let Some(path) = &args.run.report {
        write_report(path, &report)?;
    }
    print!("{}", report.render_table());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct StoreInfo<'a> {
    format_version: u32,
    dim: usize,
    embedder_fingerprint: &'a str,
    chunks: usize,
    documents: usize,
    prompt_version: String,
}

fn inspect(args: InspectArgs) -> Result<ExitCode, CliError> {
    let store = VectorStore::load(&args.store).map_err(CliError::runtime)?;
    let documents: std::collections::BTreeSet<&str> = store.chunks().map(|c| c.doc_id.as_str()).collect();
    let info = StoreInfo {
        format_version: FORMAT_VERSION,
        dim: store.dim(),
        embedder_fingerprint: store.fingerprint(),
        chunks: store.len(),
        documents: documents.len(),
        prompt_version: PromptSet::builtin().version,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&info).map_err(CliError::runtime)?
    );
    Ok(ExitCode::SUCCESS)
}
