//! The verification pipeline: retrieve, generate an intermediate response,
//! decompose it into atomic facts, check each fact against the retrieved
//! scenes and, failing that, against sampled self-checks of the model,
//! then rewrite the response without the facts that did not pass.

pub mod prompts;
mod threshold;

use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::knowledge_base::{KbError, KnowledgeBase};
use crate::llm::{ChatRequest, GenerationParams, LlmClient, LlmError, PurposeTag};
use crate::retrieval::{Document, RetrievalError, RetrievalResult, Retriever};
use crate::task::InterviewTask;

use prompts::{Role, Verdict};
pub use threshold::{confidence_gate, Threshold, ThresholdError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage}: {source}")]
    Stage {
        stage: PurposeTag,
        #[source]
        source: LlmError,
    },
    #[error("stage ret: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("invalid pipeline config: {0}")]
    Config(String),
}

impl PipelineError {
    /// Short stage name for error reporting (`ret`, `irg`, `dec`, ...).
    pub fn stage_name(&self) -> &'static str {
        match self {
            PipelineError::Stage { stage, .. } => stage.as_str(),
            PipelineError::Retrieval(_) => "ret",
            PipelineError::Kb(_) => "setup",
            PipelineError::Config(_) => "config",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Retrieved documents per query.
    pub n: usize,
    /// Self-check sample size. `0` means only retrieval-supported facts survive.
    pub m: u32,
    pub t: Threshold,
    pub generation: GenerationParams,
    pub self_check: GenerationParams,
    pub verification: GenerationParams,
    pub anonymize: bool,
    /// When false, retrieved scenes are left out of the generation prompt.
    /// Retrieval still runs and still backs the retrieval fact-check.
    pub use_retrieval: bool,
    pub use_profile: bool,
    /// Wall-clock stage timings make traces non-reproducible, so they are opt-in.
    pub record_timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n: 5,
            m: 5,
            t: Threshold::default(),
            generation: GenerationParams::character(),
            self_check: GenerationParams::self_check(),
            verification: GenerationParams::deterministic(),
            anonymize: false,
            use_retrieval: true,
            use_profile: true,
            record_timings: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for p in [&self.generation, &self.self_check, &self.verification] {
            p.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Applies one seed to every decoding setting.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.generation.seed = seed;
        self.self_check.seed = seed;
        self.verification.seed = seed;
        self
    }

    pub fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot {
            n: self.n,
            m: self.m,
            t: self.t,
            anonymize: self.anonymize,
            use_retrieval: self.use_retrieval,
            use_profile: self.use_profile,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Kgr,
    Sr,
    Rolefact,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Kgr, Method::Sr, Method::Rolefact];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Kgr => "kgr",
            Method::Sr => "sr",
            Method::Rolefact => "rolefact",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected baseline, kgr, sr or rolefact)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactStatus {
    RetrievalSupported,
    SelfSupported { k: u32, m: u32 },
    Unsupported { k: u32, m: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicFact {
    pub fact_id: String,
    pub text: String,
    pub status: FactStatus,
    /// Retrieved documents the retrieval check was run against, when it passed.
    pub evidence: Vec<String>,
}

impl AtomicFact {
    pub fn is_verified(&self) -> bool {
        !matches!(self.status, FactStatus::Unsupported { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: PurposeTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact_id: Option<String>,
    pub sample_index: u32,
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    pub doc_id: String,
    pub scene_index: u32,
    pub time: u64,
    pub score: f64,
    pub line: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub n: usize,
    pub m: u32,
    pub t: Threshold,
    pub anonymize: bool,
    pub use_retrieval: bool,
    pub use_profile: bool,
}

/// Full audit of one run. Serialized as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTrace {
    pub method: Method,
    pub task: InterviewTask,
    pub config: ConfigSnapshot,
    pub retrieved: Vec<RetrievedDoc>,
    pub intermediate: String,
    pub facts: Vec<AtomicFact>,
    /// Ids of facts removed by the rewrite.
    pub removed: Vec<String>,
    pub final_response: String,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timings: Vec<StageTiming>,
}

impl ResponseTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn verified_facts(&self) -> impl Iterator<Item = &AtomicFact> {
        self.facts.iter().filter(|f| f.is_verified())
    }

    pub fn verified_texts(&self) -> BTreeSet<String> {
        self.verified_facts().map(|f| f.text.clone()).collect()
    }

    pub fn stage_count(&self, stage: PurposeTag) -> usize {
        self.stages.iter().filter(|s| s.stage == stage).count()
    }

    /// Checks the structural invariants every trace must satisfy.
    pub fn check_invariants(&self) -> Result<(), String> {
        let unsupported: Vec<&str> = self
            .facts
            .iter()
            .filter(|f| !f.is_verified())
            .map(|f| f.fact_id.as_str())
            .collect();
        if unsupported != self.removed.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(format!(
                "removed set {:?} differs from unsupported facts {unsupported:?}",
                self.removed
            ));
        }
        if self.removed.is_empty() && self.final_response != self.intermediate {
            return Err("nothing removed but the final response differs from the intermediate".into());
        }
        let t = self.config.t;
        for f in &self.facts {
            match f.status {
                FactStatus::SelfSupported { k, m } if !confidence_gate(k, m, t) => {
                    return Err(format!("{} self-supported with k={k}, m={m} below t={t}", f.fact_id));
                }
                FactStatus::Unsupported { k, m } if k > m || confidence_gate(k, m, t) => {
                    return Err(format!("{} unsupported with k={k}, m={m} passing t={t}", f.fact_id));
                }
                _ => {}
            }
            if let Some(id) = f.evidence.iter().find(|id| !self.retrieved.iter().any(|d| &d.doc_id == *id)) {
                return Err(format!("{} cites {id}, which was not retrieved", f.fact_id));
            }
        }
        if let Some(cutoff) = self.task.cutoff {
            if let Some(d) = self.retrieved.iter().find(|d| d.time > cutoff) {
                return Err(format!("retrieved {} at t={} past cutoff {cutoff}", d.doc_id, d.time));
            }
        }
        Ok(())
    }
}

/// Issues stage requests and keeps the audit log for one run.
pub struct Recorder<'a> {
    client: &'a LlmClient,
    record_timings: bool,
    stages: Vec<StageRecord>,
    timings: Vec<StageTiming>,
    warnings: Vec<String>,
}

impl<'a> Recorder<'a> {
    pub fn new(client: &'a LlmClient) -> Self {
        Recorder {
            client,
            record_timings: false,
            stages: Vec::new(),
            timings: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn with_timings(mut self, on: bool) -> Self {
        self.record_timings = on;
        self
    }

    pub fn client(&self) -> &LlmClient {
        self.client
    }

    pub fn stages(&self) -> &[StageRecord] {
        &self.stages
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn warn(&mut self, message: String) {
        warn!("{message}");
        self.warnings.push(message);
    }

    fn timed(&mut self, stage: &str, started: Instant) {
        if self.record_timings {
            self.timings.push(StageTiming {
                stage: stage.to_string(),
                millis: started.elapsed().as_millis() as u64,
            });
        }
    }

    fn call(&mut self, request: ChatRequest, fact_id: Option<&str>) -> Result<String, PipelineError> {
        let started = Instant::now();
        let stage = request.purpose;
        let response = self
            .client
            .complete(&request)
            .map_err(|source| PipelineError::Stage { stage, source })?;
        self.stages.push(StageRecord {
            stage,
            fact_id: fact_id.map(str::to_string),
            sample_index: 0,
            prompt: request.user_prompt,
            completion: response.text.clone(),
        });
        self.timed(stage.as_str(), started);
        Ok(response.text)
    }

    fn sample(&mut self, request: ChatRequest, m: u32, fact_id: &str) -> Result<Vec<String>, PipelineError> {
        let started = Instant::now();
        let stage = request.purpose;
        let responses = self
            .client
            .sample_n(&request, m)
            .map_err(|source| PipelineError::Stage { stage, source })?;
        let texts: Vec<String> = responses.into_iter().map(|r| r.text).collect();
        for (i, text) in texts.iter().enumerate() {
            self.stages.push(StageRecord {
                stage,
                fact_id: Some(fact_id.to_string()),
                sample_index: i as u32,
                prompt: request.user_prompt.clone(),
                completion: text.clone(),
            });
        }
        self.timed(stage.as_str(), started);
        Ok(texts)
    }
}

/// Everything a method needs before its first model call: the role, its
/// profile, and the retrieved scenes for the task's query and cutoff.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub task: InterviewTask,
    pub story_title: String,
    pub profile: Option<String>,
    pub retrieval: RetrievalResult,
}

impl Prepared {
    pub fn role(&self) -> Role<'_> {
        Role {
            name: &self.task.character,
            story_title: &self.story_title,
        }
    }

    pub fn documents(&self) -> Vec<Document> {
        self.retrieval.hits.iter().map(|h| h.document.clone()).collect()
    }

    pub fn retrieved_docs(&self) -> Vec<RetrievedDoc> {
        self.retrieval
            .hits
            .iter()
            .map(|h| RetrievedDoc {
                doc_id: h.document.doc_id.clone(),
                scene_index: h.document.scene_index,
                time: h.document.time,
                score: h.score,
                line: h.document.prompt_line(),
            })
            .collect()
    }
}

/// Resolves the task against the knowledge base and runs retrieval.
pub fn prepare(
    kb: &KnowledgeBase,
    retriever: &dyn Retriever,
    task: &InterviewTask,
    cfg: &PipelineConfig,
) -> Result<Prepared, PipelineError> {
    cfg.validate()?;
    let story = kb.story(&task.story_id)?;
    if !story.characters.contains(&task.character) {
        return Err(KbError::UnknownProfile {
            story_id: task.story_id.clone(),
            character: task.character.clone(),
        }
        .into());
    }
    let profile = if cfg.use_profile {
        Some(kb.get_profile(&task.story_id, &task.character)?.description.clone())
    } else {
        None
    };
    let retrieval = retriever.retrieve(&task.story_id, &task.query, cfg.n, task.cutoff)?;
    Ok(Prepared {
        task: task.clone(),
        story_title: story.title.clone(),
        profile,
        retrieval,
    })
}

/// Intermediate response from the role prompt, profile and retrieved scenes.
pub fn generate_intermediate(
    rec: &mut Recorder<'_>,
    prepared: &Prepared,
    cfg: &PipelineConfig,
) -> Result<String, PipelineError> {
    let docs = prepared.documents();
    let prompt = prompts::render_irg_prompt(
        prepared.role(),
        &prepared.task.query,
        prepared.profile.as_deref(),
        cfg.use_retrieval.then_some(docs.as_slice()),
        cfg.anonymize,
    );
    rec.call(ChatRequest::new(PurposeTag::Irg, prompt, cfg.generation), None)
}

/// Atomic facts of `response`, spoken by `speaker`. A completion without
/// list markers yields no facts and a warning.
pub fn decompose(
    rec: &mut Recorder<'_>,
    speaker: &str,
    response: &str,
    purpose: PurposeTag,
    params: GenerationParams,
) -> Result<Vec<String>, PipelineError> {
    if response.trim().is_empty() {
        return Ok(Vec::new());
    }
    let utterance = format!("{speaker}: {}", response.trim());
    let completion = rec.call(
        ChatRequest::new(purpose, prompts::render_dec_prompt(&utterance), params),
        None,
    )?;
    let facts = prompts::parse_fact_list(&completion);
    if facts.is_empty() {
        rec.warn(format!("decomposition produced no list items: {:?}", truncate(&completion, 80)));
    }
    Ok(facts)
}

/// Retrieval fact-check against all retrieved documents jointly. No
/// evidence means unsupported, without a model call.
pub fn fact_check_retrieval(
    rec: &mut Recorder<'_>,
    fact_id: &str,
    statement: &str,
    evidence: &[Document],
    purpose: PurposeTag,
    params: GenerationParams,
) -> Result<bool, PipelineError> {
    if evidence.is_empty() {
        return Ok(false);
    }
    let completion = rec.call(
        ChatRequest::new(purpose, prompts::render_fcr_prompt(statement, evidence), params),
        Some(fact_id),
    )?;
    Ok(read_verdict(rec, fact_id, &completion))
}

/// Sampled self fact-check: `k` supporting verdicts out of `m` samples.
pub fn fact_check_self(
    rec: &mut Recorder<'_>,
    role: Role<'_>,
    fact_id: &str,
    statement: &str,
    m: u32,
    params: GenerationParams,
) -> Result<u32, PipelineError> {
    if m == 0 {
        return Ok(0);
    }
    let request = ChatRequest::new(PurposeTag::Fcs, prompts::render_fcs_prompt(role, statement), params);
    let samples = rec.sample(request, m, fact_id)?;
    let mut k = 0;
    for s in &samples {
        if read_verdict(rec, fact_id, s) {
            k += 1;
        }
    }
    Ok(k)
}

fn read_verdict(rec: &mut Recorder<'_>, fact_id: &str, completion: &str) -> bool {
    match prompts::parse_verdict(completion) {
        Verdict::Unparseable => {
            rec.warn(format!(
                "{fact_id}: unparseable verdict {:?}, counted as unsupported",
                truncate(completion, 80)
            ));
            false
        }
        v => v.is_supported(),
    }
}

/// Rewrites `response` without the listed claims.
pub fn self_reflect_update(
    rec: &mut Recorder<'_>,
    role: Role<'_>,
    query: &str,
    response: &str,
    removed: &[&str],
    params: GenerationParams,
) -> Result<String, PipelineError> {
    let prompt = prompts::render_sru_prompt(role, query, response, removed);
    rec.call(ChatRequest::new(PurposeTag::Sru, prompt, params), None)
}

/// Builds the final trace from a finished run. Skips the rewrite when nothing
/// was removed.
pub(crate) fn finish(
    mut rec: Recorder<'_>,
    method: Method,
    prepared: &Prepared,
    config: ConfigSnapshot,
    intermediate: String,
    facts: Vec<AtomicFact>,
    cfg: &PipelineConfig,
) -> Result<ResponseTrace, PipelineError> {
    let removed: Vec<&AtomicFact> = facts.iter().filter(|f| !f.is_verified()).collect();
    let final_response = if removed.is_empty() {
        intermediate.clone()
    } else {
        let texts: Vec<&str> = removed.iter().map(|f| f.text.as_str()).collect();
        self_reflect_update(
            &mut rec,
            prepared.role(),
            &prepared.task.query,
            &intermediate,
            &texts,
            cfg.verification,
        )?
    };
    let removed = removed.iter().map(|f| f.fact_id.clone()).collect();
    Ok(ResponseTrace {
        method,
        task: prepared.task.clone(),
        config,
        retrieved: prepared.retrieved_docs(),
        intermediate,
        facts,
        removed,
        final_response,
        warnings: rec.warnings,
        stages: rec.stages,
        timings: rec.timings,
    })
}

pub(crate) fn fact_id(index: usize) -> String {
    format!("f{}", index + 1)
}

/// One end-to-end run of the verification pipeline.
pub fn run(
    client: &LlmClient,
    kb: &KnowledgeBase,
    retriever: &dyn Retriever,
    task: &InterviewTask,
    cfg: &PipelineConfig,
) -> Result<ResponseTrace, PipelineError> {
    let prepared = prepare(kb, retriever, task, cfg)?;
    let mut rec = Recorder::new(client).with_timings(cfg.record_timings);
    let intermediate = generate_intermediate(&mut rec, &prepared, cfg)?;
    let texts = decompose(
        &mut rec,
        &task.character,
        &intermediate,
        PurposeTag::Dec,
        cfg.verification,
    )?;
    let docs = prepared.documents();
    let mut facts = Vec::with_capacity(texts.len());
    for (i, text) in texts.into_iter().enumerate() {
        let id = fact_id(i);
        let (status, evidence) =
            if fact_check_retrieval(&mut rec, &id, &text, &docs, PurposeTag::Fcr, cfg.verification)? {
                (
                    FactStatus::RetrievalSupported,
                    docs.iter().map(|d| d.doc_id.clone()).collect(),
                )
            } else {
                let k = fact_check_self(&mut rec, prepared.role(), &id, &text, cfg.m, cfg.self_check)?;
                let m = cfg.m;
                let status = if confidence_gate(k, m, cfg.t) {
                    FactStatus::SelfSupported { k, m }
                } else {
                    FactStatus::Unsupported { k, m }
                };
                (status, Vec::new())
            };
        facts.push(AtomicFact {
            fact_id: id,
            text,
            status,
            evidence,
        });
    }
    finish(rec, Method::Rolefact, &prepared, cfg.snapshot(), intermediate, facts, cfg)
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}
