//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 one or more tasks failed, 2 usage or validation error.

use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use tracing::{info, warn};

use crate::baselines::respond;
use crate::evaluation::{
    calibrate, calibration_table, EvalReport, Evaluator, EvidencePolicy, DEFAULT_BUCKET_SIZE,
};
use crate::knowledge_base::{load_corpus, parse_corpus_sources, KnowledgeBase};
use crate::llm::{ChatBackend, LlmClient, RemoteBackend, RemoteConfig, ScriptedMock};
use crate::parallel::parallel_map;
use crate::pipeline::{Method, PipelineConfig, ResponseTrace, Threshold};
use crate::retrieval::{Bm25Index, IndexOptions};
use crate::segment::segment_script;
use crate::service::{serve, AppState};
use crate::task::load_tasks;

#[derive(Debug, Parser)]
#[command(name = "rolefact", version, about = "Knowledge-grounded role-play with fact verification")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus directory and write it as one JSONL file.
    Ingest(IngestArgs),
    /// Run a method over interview tasks and write one trace per task.
    Interview(InterviewArgs),
    /// Judge traces and write a metrics report.
    Eval(EvalArgs),
    /// Sweep the confidence threshold and sample size.
    Calibrate(CalibrateArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Scripted fixture file; without it the ROLEFACT_* environment variables select a remote backend.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    /// Response cache directory.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Ceiling on concurrent remote requests.
    #[arg(long, default_value_t = 8)]
    pub max_in_flight: usize,
}

impl BackendArgs {
    fn client(&self) -> Result<LlmClient> {
        let backend: Arc<dyn ChatBackend> = match &self.mock {
            Some(path) => Arc::new(ScriptedMock::load(path)?),
            None => {
                let mut cfg = RemoteConfig::from_env().context("no --mock given and no remote backend configured")?;
                cfg.max_in_flight = self.max_in_flight;
                Arc::new(RemoteBackend::new(cfg)?)
            }
        };
        Ok(match &self.cache {
            Some(dir) => LlmClient::with_disk_cache(backend, dir)?,
            None => LlmClient::new(backend),
        })
    }
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Confidence threshold, as `p/q` or a decimal.
    #[arg(long, default_value = "3/5")]
    pub t: Threshold,
    /// Self-check samples per fact.
    #[arg(long, default_value_t = 5)]
    pub m: u32,
    /// Retrieved scenes per query.
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Replace character and story names in the generation prompt.
    #[arg(long)]
    pub anonymize: bool,
    /// Leave retrieved scenes out of the generation prompt.
    #[arg(long)]
    pub no_retrieval: bool,
    /// Leave the character profile out of the generation prompt.
    #[arg(long)]
    pub no_profile: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record wall-clock stage timings in traces.
    #[arg(long)]
    pub timings: bool,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig> {
        if self.n == 0 {
            bail!("--n must be at least 1");
        }
        let cfg = PipelineConfig {
            n: self.n,
            m: self.m,
            t: self.t,
            anonymize: self.anonymize,
            use_retrieval: !self.no_retrieval,
            use_profile: !self.no_profile,
            record_timings: self.timings,
            ..PipelineConfig::default()
        }
        .with_seed(self.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of pre-segmented `*.jsonl` files and/or raw script texts.
    #[arg(long)]
    pub scripts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Segment raw script files with the model.
    #[arg(long)]
    pub llm_segment: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct InterviewArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long, default_value = "rolefact")]
    pub method: Method,
    #[arg(long)]
    pub out: PathBuf,
    /// Tasks run concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    /// Evidence per fact: top-k in-scope events by BM25; 0 passes every in-scope event.
    #[arg(long, default_value_t = 10)]
    pub evidence_k: usize,
    #[arg(long, default_value_t = DEFAULT_BUCKET_SIZE)]
    pub bucket_size: u32,
}

impl JudgeArgs {
    fn policy(&self) -> EvidencePolicy {
        match self.evidence_k {
            0 => EvidencePolicy::AllInScope,
            k => EvidencePolicy::TopK(k),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[command(flatten)]
    pub judge: JudgeArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub kb: PathBuf,
    /// Validation tasks.
    #[arg(long)]
    pub tasks: PathBuf,
    /// Comma-separated thresholds, e.g. `0,1/5,3/5,1`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub t_grid: Vec<Threshold>,
    /// Comma-separated sample sizes, e.g. `0,5,10`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub m_grid: Vec<u32>,
    /// Optional JSON output of the rows.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub judge: JudgeArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
    /// Permissive CORS headers for a browser UI on another origin.
    #[arg(long)]
    pub cors: bool,
    /// Append-only session log, replayed on startup.
    #[arg(long)]
    pub session_log: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

enum Failure {
    Tasks(usize),
    Usage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

pub fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_env("ROLEFACT_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

pub fn run(cli: Cli) -> ExitCode {
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Ingest(a) => ingest(a).map_err(Failure::from),
        Command::Interview(a) => interview(a),
        Command::Eval(a) => eval(a).map_err(Failure::from),
        Command::Calibrate(a) => calibrate_cmd(a).map_err(Failure::from),
        Command::Serve(a) => serve_cmd(a).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Tasks(n)) => {
            eprintln!("error: {n} task(s) failed");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn build_index(kb: &KnowledgeBase) -> Result<Bm25Index> {
    Ok(Bm25Index::from_knowledge_base(kb, IndexOptions::default())?)
}

fn write_atomically(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn ingest(args: IngestArgs) -> Result<()> {
    let dir = &args.scripts;
    let mut files: Vec<PathBuf> = if dir.is_file() {
        vec![dir.clone()]
    } else {
        fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .filter(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .collect()
    };
    files.sort();
    if files.is_empty() {
        bail!("{}: no script files", dir.display());
    }
    let (segmented, raw): (Vec<PathBuf>, Vec<PathBuf>) = files
        .into_iter()
        .partition(|p| p.extension().is_some_and(|e| e == "jsonl"));
    if !raw.is_empty() && !args.llm_segment {
        let names: Vec<String> = raw.iter().map(|p| p.display().to_string()).collect();
        bail!(
            "raw script files need --llm-segment (or convert them to JSONL first): {}",
            names.join(", ")
        );
    }
    let mut sources = Vec::new();
    for path in &segmented {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        sources.push((path.clone(), text));
    }
    if !raw.is_empty() {
        let client = args.backend.client()?;
        for path in &raw {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let story_id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| anyhow!("{}: no file name", path.display()))?;
            let events = segment_script(&client, &story_id, &text).with_context(|| format!("{}", path.display()))?;
            let mut jsonl = serde_json::to_string(&json!({
                "record": "story",
                "story_id": story_id,
                "title": story_id,
                "scripts": [path.file_name().map(|n| n.to_string_lossy().into_owned())],
            }))?;
            jsonl.push('\n');
            for event in &events {
                let mut v = serde_json::to_value(event)?;
                if let Value::Object(map) = &mut v {
                    map.insert("record".into(), Value::String("event".into()));
                }
                jsonl.push_str(&serde_json::to_string(&v)?);
                jsonl.push('\n');
            }
            info!("{}: segmented into {} events", path.display(), events.len());
            sources.push((path.clone(), jsonl));
        }
    }
    let kb = parse_corpus_sources(&sources)?;
    write_atomically(&args.out, &kb.to_jsonl())?;
    let events: usize = kb.stories().map(|s| s.events.len()).sum();
    eprintln!(
        "wrote {} stories, {} events, {} profiles to {}",
        kb.stories().count(),
        events,
        kb.profiles().count(),
        args.out.display()
    );
    Ok(())
}

fn interview(args: InterviewArgs) -> Result<(), Failure> {
    let kb = load_kb(&args.kb)?;
    let tasks = load_tasks(&args.tasks).map_err(anyhow::Error::from)?;
    let cfg = args.pipeline.config()?;
    let index = build_index(&kb)?;
    let client = args.backend.client()?;
    let results = parallel_map(&tasks, args.parallel, |task| {
        respond(args.method, &client, &kb, &index, task, &cfg)
    });
    let mut out = String::new();
    let mut failures = String::new();
    let mut failed = 0;
    for (task, result) in tasks.iter().zip(results) {
        match result {
            Ok(trace) => {
                out.push_str(&trace.to_json());
                out.push('\n');
            }
            Err(e) => {
                failed += 1;
                eprintln!("task {}: {e}", task.task_id);
                failures.push_str(
                    &json!({ "task_id": task.task_id, "stage": e.stage_name(), "error": e.to_string() }).to_string(),
                );
                failures.push('\n');
            }
        }
    }
    write_atomically(&args.out, &out)?;
    let failure_path = failure_log_path(&args.out);
    if failed > 0 {
        write_atomically(&failure_path, &failures)?;
    } else if failure_path.exists() {
        let _ = fs::remove_file(&failure_path);
    }
    let stats = client.stats();
    info!(
        "{} requests, {} backend calls",
        stats.total_requests(),
        stats.total_backend_calls()
    );
    eprintln!(
        "wrote {} traces to {} ({} backend calls)",
        tasks.len() - failed,
        args.out.display(),
        client.backend_calls()
    );
    if failed > 0 {
        return Err(Failure::Tasks(failed));
    }
    Ok(())
}

/// `traces.jsonl` -> `traces.failures.jsonl`.
pub fn failure_log_path(out: &Path) -> PathBuf {
    out.with_extension("failures.jsonl")
}

pub fn load_traces(path: &Path) -> Result<Vec<ResponseTrace>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn eval(args: EvalArgs) -> Result<()> {
    let kb = load_kb(&args.kb)?;
    let traces = load_traces(&args.traces)?;
    if traces.is_empty() {
        bail!("{}: no traces", args.traces.display());
    }
    let index = build_index(&kb)?;
    let client = args.backend.client()?;
    let evaluator = Evaluator::new(&client, &kb, &index).with_policy(args.judge.policy());
    let judged = evaluator.judge_all(&traces, args.parallel)?;
    let report = EvalReport::build(&judged, args.judge.bucket_size);
    let doc = json!({ "report": report, "responses": judged });
    write_atomically(&args.out, &serde_json::to_string_pretty(&doc)?)?;
    print!("{}", report.table());
    for (method, r) in &report.methods {
        if let Some(thr) = r.overall.thr_proxy {
            println!("{method}: temporal hallucinations per 100 cutoff responses = {thr:.1}");
        }
    }
    std::io::stdout().flush()?;
    Ok(())
}

fn calibrate_cmd(args: CalibrateArgs) -> Result<()> {
    let kb = load_kb(&args.kb)?;
    let tasks = load_tasks(&args.tasks)?;
    let cfg = args.pipeline.config()?;
    let index = build_index(&kb)?;
    let client = args.backend.client()?;
    let evaluator = Evaluator::new(&client, &kb, &index).with_policy(args.judge.policy());
    let rows = calibrate(
        &evaluator,
        &kb,
        &index,
        &tasks,
        &args.t_grid,
        &args.m_grid,
        &cfg,
        args.parallel,
    )?;
    if let Some(out) = &args.out {
        write_atomically(out, &serde_json::to_string_pretty(&rows)?)?;
    }
    print!("{}", calibration_table(&rows));
    Ok(())
}

fn serve_cmd(args: ServeArgs) -> Result<()> {
    let kb = Arc::new(load_kb(&args.kb)?);
    let index = Arc::new(build_index(&kb)?);
    let client = Arc::new(args.backend.client()?);
    let cfg = args.pipeline.config()?;
    let mut state = AppState::new(kb, index, client, cfg);
    if let Some(log) = &args.session_log {
        state = state
            .with_session_log(log)
            .with_context(|| format!("session log {}", log.display()))?;
    }
    if args.bind.is_unspecified() {
        warn!("binding to all interfaces; the API has no authentication");
    }
    let addr = SocketAddr::new(args.bind, args.port);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    runtime
        .block_on(serve(Arc::new(state), addr, args.cors))
        .with_context(|| format!("serving on {addr}"))?;
    Ok(())
}
