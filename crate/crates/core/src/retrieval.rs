//! Okapi BM25 over rendered knowledge events, with story-time cutoff filtering.
//!
//! One [`Document`] per knowledge event. Each story gets its own inverted
//! index; collection statistics (document count, average length, document
//! frequencies) are taken over the whole story and the cutoff is applied as a
//! filter on candidates, so a document scores the same at every cutoff that
//! admits it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge_base::{EventKind, KnowledgeBase, KnowledgeEvent, StoryTime};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("cannot build an index from an empty document set")]
    EmptyDocuments,
    #[error("duplicate document id {0}")]
    DuplicateDocument(String),
    #[error("invalid BM25 parameters k1={k1}, b={b}")]
    InvalidParams { k1: f64, b: f64 },
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("unknown story {0}")]
    UnknownStory(String),
}

/// Lowercased runs of Unicode alphanumerics. No stemming, no stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub story_id: String,
    pub time: StoryTime,
    pub scene_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    pub text: String,
    pub rendered_text: String,
}

impl Document {
    pub fn from_event(event: &KnowledgeEvent) -> Self {
        Document {
            doc_id: event.event_id.clone(),
            story_id: event.story_id.clone(),
            time: event.time,
            scene_index: event.scene_index,
            speaker: event.speaker.clone(),
            text: event.text.clone(),
            rendered_text: render_event(event),
        }
    }

    /// Prompt line: `[scene k, t=time] SPEAKER: text`, or without the speaker
    /// label for non-speech events.
    pub fn prompt_line(&self) -> String {
        match &self.speaker {
            Some(s) => format!("[scene {}, t={}] {s}: {}", self.scene_index, self.time, self.text),
            None => format!("[scene {}, t={}] {}", self.scene_index, self.time, self.text),
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.rendered_text)
    }
}

/// `SPEAKER: text` for speech, `[scene] text` for everything else.
pub fn render_event(event: &KnowledgeEvent) -> String {
    match (&event.kind, &event.speaker) {
        (EventKind::Speech, Some(speaker)) => format!("{speaker}: {}", event.text),
        _ => format!("[scene] {}", event.text),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

impl Bm25Params {
    fn validate(&self) -> Result<(), RetrievalError> {
        if self.k1 > 0.0 && (0.0..=1.0).contains(&self.b) {
            Ok(())
        } else {
            Err(RetrievalError::InvalidParams {
                k1: self.k1,
                b: self.b,
            })
        }
    }
}

/// Non-negative Okapi IDF: `ln((N - df + 0.5) / (df + 0.5) + 1)`.
pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

/// Saturated, length-normalized term frequency.
pub fn tf_weight(tf: u32, doc_len: u32, avg_len: f64, params: Bm25Params) -> f64 {
    let tf = tf as f64;
    let norm = 1.0 - params.b + params.b * doc_len as f64 / avg_len;
    tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    /// Position of the document in the index, which is sorted by `doc_id`.
    pub doc: u32,
    pub tf: u32,
}

/// Inverted index over the documents of a single story.
#[derive(Debug, Clone)]
pub struct StoryIndex {
    params: Bm25Params,
    docs: Vec<Document>,
    doc_lens: Vec<u32>,
    avg_len: f64,
    postings: HashMap<String, Vec<Posting>>,
    by_id: HashMap<String, u32>,
}

/// Deduplicates query tokens, keeping first-occurrence order.
fn unique_terms(query_tokens: &[String]) -> Vec<&str> {
    let mut seen = HashSet::new();
    query_tokens
        .iter()
        .map(String::as_str)
        .filter(|t| seen.insert(*t))
        .collect()
}

impl StoryIndex {
    pub fn build(mut docs: Vec<Document>, params: Bm25Params) -> Result<Self, RetrievalError> {
        params.validate()?;
        if docs.is_empty() {
            return Err(RetrievalError::EmptyDocuments);
        }
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        if let Some(w) = docs.windows(2).find(|w| w[0].doc_id == w[1].doc_id) {
            return Err(RetrievalError::DuplicateDocument(w[0].doc_id.clone()));
        }

        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lens = Vec::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            let tokens = doc.tokens();
            doc_lens.push(tokens.len() as u32);
            let mut tfs: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tfs.entry(t).or_default() += 1;
            }
            for (term, tf) in tfs {
                postings.entry(term).or_default().push(Posting { doc: i as u32, tf });
            }
        }
        let total: u64 = doc_lens.iter().map(|&l| l as u64).sum();
        let avg_len = total as f64 / docs.len() as f64;
        let by_id = docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.doc_id.clone(), i as u32))
            .collect();
        Ok(StoryIndex {
            params,
            docs,
            doc_lens,
            avg_len,
            postings,
            by_id,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_len
    }

    /// Documents sorted by `doc_id`.
    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.by_id.get(doc_id).map(|&i| self.doc_lens[i as usize])
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    /// BM25 score of one document. Duplicate query tokens count once.
    pub fn score(&self, query_tokens: &[String], doc_id: &str) -> Result<f64, RetrievalError> {
        let &doc = self
            .by_id
            .get(doc_id)
            .ok_or_else(|| RetrievalError::UnknownDocument(doc_id.to_string()))?;
        let mut score = 0.0;
        for term in unique_terms(query_tokens) {
            let list = self.postings(term);
            if let Ok(pos) = list.binary_search_by_key(&doc, |p| p.doc) {
                score += self.term_contribution(list.len(), list[pos]);
            }
        }
        Ok(score)
    }

    fn term_contribution(&self, doc_freq: usize, posting: Posting) -> f64 {
        idf(self.docs.len(), doc_freq)
            * tf_weight(
                posting.tf,
                self.doc_lens[posting.doc as usize],
                self.avg_len,
                self.params,
            )
    }

    /// Top `n` documents with `time <= cutoff` and a positive score.
    ///
    /// Ordering: score descending, then time ascending, then `doc_id`.
    pub fn search(&self, query: &str, n: usize, cutoff: Option<StoryTime>) -> RetrievalResult {
        if n == 0 {
            return RetrievalResult::default();
        }
        let tokens = tokenize(query);
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in unique_terms(&tokens) {
            let list = self.postings(term);
            for &posting in list {
                if cutoff.is_some_and(|c| self.docs[posting.doc as usize].time > c) {
                    continue;
                }
                *acc.entry(posting.doc).or_insert(0.0) += self.term_contribution(list.len(), posting);
            }
        }
        let mut scored: Vec<(u32, f64)> = acc.into_iter().filter(|&(_, s)| s > 0.0).collect();
        scored.sort_by(|a, b| self.rank_order(*a, *b));
        scored.truncate(n);
        RetrievalResult {
            hits: scored
                .into_iter()
                .map(|(doc, score)| ScoredDocument {
                    document: self.docs[doc as usize].clone(),
                    score,
                })
                .collect(),
        }
    }

    fn rank_order(&self, a: (u32, f64), b: (u32, f64)) -> Ordering {
        let (da, db) = (&self.docs[a.0 as usize], &self.docs[b.0 as usize]);
        b.1.total_cmp(&a.1)
            .then_with(|| da.time.cmp(&db.time))
            .then_with(|| da.doc_id.cmp(&db.doc_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDocument {
    pub document: Document,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<ScoredDocument>,
}

impl RetrievalResult {
    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn doc_ids(&self) -> Vec<String> {
        self.hits.iter().map(|h| h.document.doc_id.clone()).collect()
    }
}

/// The retrieval contract used by the pipeline. BM25 is the only shipped
/// implementation; dense retrievers can be plugged in behind the same call.
pub trait Retriever: Send + Sync {
    fn retrieve(
        &self,
        story_id: &str,
        query: &str,
        n: usize,
        cutoff: Option<StoryTime>,
    ) -> Result<RetrievalResult, RetrievalError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexOptions {
    pub params: Bm25Params,
    /// Index only speech events. Off by default.
    pub speech_only: bool,
}

/// One [`StoryIndex`] per story of a knowledge base.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    stories: BTreeMap<String, StoryIndex>,
}

impl Bm25Index {
    pub fn from_knowledge_base(
        kb: &KnowledgeBase,
        options: IndexOptions,
    ) -> Result<Self, RetrievalError> {
        let mut stories = BTreeMap::new();
        for story in kb.stories() {
            let docs: Vec<Document> = story
                .events
                .iter()
                .filter(|e| !options.speech_only || e.kind == EventKind::Speech)
                .map(Document::from_event)
                .collect();
            stories.insert(story.story_id.clone(), StoryIndex::build(docs, options.params)?);
        }
        Ok(Bm25Index { stories })
    }

    pub fn story(&self, story_id: &str) -> Result<&StoryIndex, RetrievalError> {
        self.stories
            .get(story_id)
            .ok_or_else(|| RetrievalError::UnknownStory(story_id.to_string()))
    }
}

impl Retriever for Bm25Index {
    fn retrieve(
        &self,
        story_id: &str,
        query: &str,
        n: usize,
        cutoff: Option<StoryTime>,
    ) -> Result<RetrievalResult, RetrievalError> {
        Ok(self.story(story_id)?.search(query, n, cutoff))
    }
}
