//! Knowledge-grounded role-play response generation with fact verification.
//!
//! The engine answers an interview question in character, decomposes the
//! answer into atomic facts, verifies each fact against the script (and,
//! failing that, against repeated self-checks), and rewrites the answer
//! without the facts that could not be verified.

pub mod baselines;
pub mod cli;
pub mod evaluation;
pub mod knowledge_base;
pub mod llm;
pub mod parallel;
pub mod pipeline;
pub mod retrieval;
pub mod segment;
pub mod service;
pub mod task;

pub use knowledge_base::{load_corpus, KnowledgeBase};
pub use llm::{ChatBackend, LlmClient};
pub use pipeline::{run, Method, PipelineConfig, ResponseTrace, Threshold};
pub use retrieval::{Bm25Index, Retriever};
pub use task::InterviewTask;
