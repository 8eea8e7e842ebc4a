//! Judging responses against the script, and the metric harness built on it.
//!
//! A response is decomposed into atomic facts and each fact is checked
//! against in-scope script evidence with the retrieval fact-check prompt at
//! temperature 0. For time-sensitive tasks the scope is the story up to the
//! cutoff; otherwise the whole story.
//!
//! The temporal-hallucination rate is estimated automatically: a fact counts
//! when it is unsupported by the events up to the cutoff but supported by the
//! full story, i.e. it leaks knowledge from the character's future.

mod calibrate;
mod metrics;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge_base::{KbError, KnowledgeBase, StoryTime};
use crate::llm::{GenerationParams, LlmClient, PurposeTag};
use crate::parallel::parallel_map;
use crate::pipeline::{decompose, fact_check_retrieval, Method, PipelineError, Recorder, ResponseTrace};
use crate::retrieval::{Bm25Index, Document, RetrievalError};
use crate::task::TaskType;

pub use crate::task::{load_tasks, InterviewTask};
pub use calibrate::{calibrate, calibration_table, CalibrationRow};
pub use metrics::{
    fact_score, macro_fact_score, popularity_buckets, sfpr, EvalReport, MethodReport, Metrics, PopularityBucket,
    PopularityReport, DEFAULT_BUCKET_SIZE,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no judged responses")]
    NoResponses,
    #[error("judged responses contain no atomic facts")]
    NoFacts,
    #[error("task {0} has no cutoff; the temporal-hallucination proxy needs one")]
    MissingCutoff(String),
    #[error("empty calibration grid")]
    EmptyGrid,
    #[error("task {task_id}: {source}")]
    Task {
        task_id: String,
        #[source]
        source: PipelineError,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgedFact {
    pub text: String,
    pub supported: bool,
    /// `full_story` or `t<=N`.
    pub judged_against: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgedResponse {
    pub task_id: String,
    pub method: Method,
    pub task_type: TaskType,
    pub story_id: String,
    pub character: String,
    pub popularity_rank: Option<u32>,
    pub facts: Vec<JudgedFact>,
    /// Future-only-supported facts; `None` for tasks without a cutoff.
    pub temporal_hallucinations: Option<usize>,
}

impl JudgedResponse {
    pub fn supported_count(&self) -> usize {
        self.facts.iter().filter(|f| f.supported).count()
    }
}

pub fn scope_label(cutoff: Option<StoryTime>) -> String {
    match cutoff {
        Some(c) => format!("t<={c}"),
        None => "full_story".to_string(),
    }
}

/// Evidence handed to the judge for each fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum EvidencePolicy {
    /// Every in-scope event. Exact, but prompts grow with the story.
    AllInScope,
    /// The top-k in-scope events by BM25 against the fact text.
    TopK(usize),
}

impl Default for EvidencePolicy {
    fn default() -> Self {
        EvidencePolicy::TopK(10)
    }
}

/// Decomposes `response` and judges every fact against the same evidence set.
pub fn judge_facts(
    client: &LlmClient,
    speaker: &str,
    response: &str,
    evidence: &[Document],
    judged_against: &str,
) -> Result<Vec<JudgedFact>, PipelineError> {
    let params = GenerationParams::deterministic();
    let mut rec = Recorder::new(client);
    let texts = decompose(&mut rec, speaker, response, PurposeTag::Judge, params)?;
    let mut out = Vec::with_capacity(texts.len());
    for (i, text) in texts.into_iter().enumerate() {
        let supported =
            fact_check_retrieval(&mut rec, &format!("j{}", i + 1), &text, evidence, PurposeTag::Judge, params)?;
        out.push(JudgedFact {
            text,
            supported,
            judged_against: judged_against.to_string(),
        });
    }
    Ok(out)
}

pub struct Evaluator<'a> {
    client: &'a LlmClient,
    kb: &'a KnowledgeBase,
    index: &'a Bm25Index,
    policy: EvidencePolicy,
    params: GenerationParams,
}

impl<'a> Evaluator<'a> {
    pub fn new(client: &'a LlmClient, kb: &'a KnowledgeBase, index: &'a Bm25Index) -> Self {
        Evaluator {
            client,
            kb,
            index,
            policy: EvidencePolicy::default(),
            params: GenerationParams::deterministic(),
        }
    }

    pub fn with_policy(mut self, policy: EvidencePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn client(&self) -> &LlmClient {
        self.client
    }

    fn evidence(&self, story_id: &str, statement: &str, cutoff: Option<StoryTime>) -> Result<Vec<Document>, EvalError> {
        Ok(match self.policy {
            EvidencePolicy::AllInScope => self
                .kb
                .events_up_to(story_id, cutoff)?
                .iter()
                .map(Document::from_event)
                .collect(),
            EvidencePolicy::TopK(k) => self
                .index
                .story(story_id)?
                .search(statement, k, cutoff)
                .hits
                .into_iter()
                .map(|h| h.document)
                .collect(),
        })
    }

    fn popularity_rank(&self, task: &InterviewTask) -> Option<u32> {
        task.popularity_rank.or_else(|| {
            self.kb
                .story(&task.story_id)
                .ok()
                .and_then(|s| s.popularity_rank(&task.character))
        })
    }

    /// Judges the final response of a trace.
    pub fn judge_trace(&self, trace: &ResponseTrace) -> Result<JudgedResponse, EvalError> {
        let task = &trace.task;
        let mut rec = Recorder::new(self.client);
        let texts = decompose(&mut rec, &task.character, &trace.final_response, PurposeTag::Judge, self.params)?;
        let label = scope_label(task.cutoff);
        let mut facts = Vec::with_capacity(texts.len());
        let mut temporal = 0;
        for (i, text) in texts.into_iter().enumerate() {
            let id = format!("j{}", i + 1);
            let evidence = self.evidence(&task.story_id, &text, task.cutoff)?;
            let supported =
                fact_check_retrieval(&mut rec, &id, &text, &evidence, PurposeTag::Judge, self.params)?;
            if !supported && task.cutoff.is_some() {
                let full = self.evidence(&task.story_id, &text, None)?;
                if fact_check_retrieval(&mut rec, &id, &text, &full, PurposeTag::Judge, self.params)? {
                    temporal += 1;
                }
            }
            facts.push(JudgedFact {
                text,
                supported,
                judged_against: label.clone(),
            });
        }
        Ok(JudgedResponse {
            task_id: task.task_id.clone(),
            method: trace.method,
            task_type: task.task_type,
            story_id: task.story_id.clone(),
            character: task.character.clone(),
            popularity_rank: self.popularity_rank(task),
            facts,
            temporal_hallucinations: task.cutoff.map(|_| temporal),
        })
    }

    /// Number of facts in the trace's final response that are supported by
    /// the full story but not by the events up to the cutoff.
    pub fn thr_proxy(&self, trace: &ResponseTrace) -> Result<usize, EvalError> {
        if trace.task.cutoff.is_none() {
            return Err(EvalError::MissingCutoff(trace.task.task_id.clone()));
        }
        Ok(self.judge_trace(trace)?.temporal_hallucinations.unwrap_or(0))
    }

    /// Judges traces on up to `workers` threads; output keeps input order.
    pub fn judge_all(&self, traces: &[ResponseTrace], workers: usize) -> Result<Vec<JudgedResponse>, EvalError> {
        parallel_map(traces, workers, |t| self.judge_trace(t))
            .into_iter()
            .collect()
    }

    pub fn evaluate(
        &self,
        traces: &[ResponseTrace],
        workers: usize,
        bucket_size: u32,
    ) -> Result<(Vec<JudgedResponse>, EvalReport), EvalError> {
        let judged = self.judge_all(traces, workers)?;
        let report = EvalReport::build(&judged, bucket_size);
        Ok((judged, report))
    }
}
