//! Comparison systems: plain role prompting, knowledge-guided rewriting
//! (keep only retrieval-supported facts) and self-reflection (keep only
//! facts the model itself confirms). The rewrites reuse the pipeline's
//! rewrite prompt so all methods differ only in which facts they remove.

use crate::knowledge_base::KnowledgeBase;
use crate::llm::{LlmClient, PurposeTag};
use crate::pipeline::{
    self, confidence_gate, decompose, fact_check_retrieval, fact_check_self, generate_intermediate, prepare,
    AtomicFact, FactStatus, Method, PipelineConfig, PipelineError, Recorder, ResponseTrace,
};
use crate::retrieval::Retriever;
use crate::task::InterviewTask;

/// Role prompt, profile and retrieved dialogue; one model call, no verification.
pub fn baseline_respond(
    client: &LlmClient,
    kb: &KnowledgeBase,
    retriever: &dyn Retriever,
    task: &InterviewTask,
    cfg: &PipelineConfig,
) -> Result<ResponseTrace, PipelineError> {
    let prepared = prepare(kb, retriever, task, cfg)?;
    let mut rec = Recorder::new(client).with_timings(cfg.record_timings);
    let z = generate_intermediate(&mut rec, &prepared, cfg)?;
    pipeline::finish(rec, Method::Baseline, &prepared, cfg.snapshot(), z, Vec::new(), cfg)
}

/// Baseline response with every fact not supported by the retrieved scenes removed.
pub fn kgr_respond(
    client: &LlmClient,
    kb: &KnowledgeBase,
    retriever: &dyn Retriever,
    task: &InterviewTask,
    cfg: &PipelineConfig,
) -> Result<ResponseTrace, PipelineError> {
    let prepared = prepare(kb, retriever, task, cfg)?;
    let mut rec = Recorder::new(client).with_timings(cfg.record_timings);
    let z = generate_intermediate(&mut rec, &prepared, cfg)?;
    let texts = decompose(&mut rec, &task.character, &z, PurposeTag::Dec, cfg.verification)?;
    let docs = prepared.documents();
    let mut facts = Vec::with_capacity(texts.len());
    for (i, text) in texts.into_iter().enumerate() {
        let id = pipeline::fact_id(i);
        let supported = fact_check_retrieval(&mut rec, &id, &text, &docs, PurposeTag::Fcr, cfg.verification)?;
        facts.push(AtomicFact {
            status: if supported {
                FactStatus::RetrievalSupported
            } else {
                FactStatus::Unsupported { k: 0, m: 0 }
            },
            evidence: if supported {
                docs.iter().map(|d| d.doc_id.clone()).collect()
            } else {
                Vec::new()
            },
            fact_id: id,
            text,
        });
    }
    let mut snapshot = cfg.snapshot();
    snapshot.m = 0;
    pipeline::finish(rec, Method::Kgr, &prepared, snapshot, z, facts, cfg)
}

/// Baseline response with every fact that fails the sampled self-check
/// (`k/m < t`) removed. The retrieved scenes are never consulted for checking.
pub fn sr_respond(
    client: &LlmClient,
    kb: &KnowledgeBase,
    retriever: &dyn Retriever,
    task: &InterviewTask,
    cfg: &PipelineConfig,
) -> Result<ResponseTrace, PipelineError> {
    let prepared = prepare(kb, retriever, task, cfg)?;
    let mut rec = Recorder::new(client).with_timings(cfg.record_timings);
    let z = generate_intermediate(&mut rec, &prepared, cfg)?;
    let texts = decompose(&mut rec, &task.character, &z, PurposeTag::Dec, cfg.verification)?;
    let mut facts = Vec::with_capacity(texts.len());
    for (i, text) in texts.into_iter().enumerate() {
        let id = pipeline::fact_id(i);
        let k = fact_check_self(&mut rec, prepared.role(), &id, &text, cfg.m, cfg.self_check)?;
        let m = cfg.m;
        facts.push(AtomicFact {
            fact_id: id,
            text,
            status: if confidence_gate(k, m, cfg.t) {
                FactStatus::SelfSupported { k, m }
            } else {
                FactStatus::Unsupported { k, m }
            },
            evidence: Vec::new(),
        });
    }
    pipeline::finish(rec, Method::Sr, &prepared, cfg.snapshot(), z, facts, cfg)
}

/// Dispatches to the pipeline or one of the baselines.
pub fn respond(
    method: Method,
    client: &LlmClient,
    kb: &KnowledgeBase,
    retriever: &dyn Retriever,
    task: &InterviewTask,
    cfg: &PipelineConfig,
) -> Result<ResponseTrace, PipelineError> {
    match method {
        Method::Baseline => baseline_respond(client, kb, retriever, task, cfg),
        Method::Kgr => kgr_respond(client, kb, retriever, task, cfg),
        Method::Sr => sr_respond(client, kb, retriever, task, cfg),
        Method::Rolefact => pipeline::run(client, kb, retriever, task, cfg),
    }
}
