#![allow(dead_code)]

pub mod gen;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rolefact::knowledge_base::{load_corpus, KnowledgeBase};
use rolefact::llm::{ChatBackend, ChatRequest, GenerationParams, LlmClient, PurposeTag, ScriptedMock};
use rolefact::retrieval::{Bm25Index, Document, IndexOptions};
use rolefact::task::{load_tasks, InterviewTask};
use serde_json::{json, Value};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn kb() -> KnowledgeBase {
    load_corpus(fixture("corpus.jsonl")).expect("fixture corpus")
}

pub fn index(kb: &KnowledgeBase) -> Bm25Index {
    Bm25Index::from_knowledge_base(kb, IndexOptions::default()).expect("fixture index")
}

pub fn tasks() -> Vec<InterviewTask> {
    load_tasks(fixture("tasks.jsonl")).expect("fixture tasks")
}

pub fn mock() -> ScriptedMock {
    ScriptedMock::load(fixture("mock.jsonl")).expect("fixture mock")
}

pub fn mock_client() -> LlmClient {
    LlmClient::new(Arc::new(mock()))
}

/// Hand-derived verified fact sets per task at the default m=5, t=3/5.
pub fn expected_verified() -> BTreeMap<String, BTreeSet<String>> {
    let text = std::fs::read_to_string(fixture("expected_verified.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

// ---- BM25 oracle -----------------------------------------------------------

/// Exhaustive BM25: score every document from scratch, then sort.
pub struct NaiveBm25 {
    docs: Vec<(String, u64, Vec<String>)>,
    k1: f64,
    b: f64,
}

fn oracle_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl NaiveBm25 {
    pub fn new(docs: &[Document]) -> Self {
        NaiveBm25 {
            docs: docs
                .iter()
                .map(|d| (d.doc_id.clone(), d.time, oracle_tokens(&d.rendered_text)))
                .collect(),
            k1: 1.2,
            b: 0.75,
        }
    }

    pub fn score(&self, query: &str, doc: usize) -> f64 {
        let n = self.docs.len() as f64;
        let avg = self.docs.iter().map(|d| d.2.len()).sum::<usize>() as f64 / n;
        let mut seen = BTreeSet::new();
        let mut total = 0.0;
        for term in oracle_tokens(query) {
            if !seen.insert(term.clone()) {
                continue;
            }
            let df = self.docs.iter().filter(|d| d.2.contains(&term)).count() as f64;
            let tf = self.docs[doc].2.iter().filter(|t| **t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            let len = self.docs[doc].2.len() as f64;
            total += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * len / avg));
        }
        total
    }

    /// (doc_id, score) in rank order.
    pub fn search(&self, query: &str, n: usize, cutoff: Option<u64>) -> Vec<(String, f64)> {
        let mut all: Vec<(String, u64, f64)> = (0..self.docs.len())
            .filter(|&i| cutoff.is_none_or(|c| self.docs[i].1 <= c))
            .map(|i| (self.docs[i].0.clone(), self.docs[i].1, self.score(query, i)))
            .filter(|x| x.2 > 0.0)
            .collect();
        all.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        });
        all.into_iter().take(n).map(|(id, _, s)| (id, s)).collect()
    }
}

// ---- gate oracle -----------------------------------------------------------

/// k/m >= p/q by cross-multiplication in 128-bit integers; m = 0 never passes.
pub fn gate_oracle(k: u32, m: u32, p: u32, q: u32) -> bool {
    m != 0 && (k as u128) * (q as u128) >= (p as u128) * (m as u128)
}

// ---- a backend whose verdicts are computed from the prompt ----------------

/// Answers every stage from simple rules so tests can construct scenarios
/// without fixture files. Facts are `statement -> supporting doc_ids`; a
/// retrieval check succeeds when any supporting doc appears in the evidence.
pub struct RuleBackend {
    pub response: String,
    pub facts: Vec<(String, Vec<String>)>,
    /// Self-check verdicts per statement, by sample index.
    pub self_checks: BTreeMap<String, Vec<bool>>,
    pub calls: AtomicUsize,
}

impl RuleBackend {
    pub fn new(response: &str, facts: Vec<(String, Vec<String>)>) -> Self {
        RuleBackend {
            response: response.to_string(),
            facts,
            self_checks: BTreeMap::new(),
            calls: AtomicUsize::new(0),
        }
    }
}

fn statement_of(prompt: &str) -> &str {
    let rest = prompt.split("\nStatement: ").nth(1).unwrap_or("");
    rest.split('\n').next().unwrap_or("")
}

impl ChatBackend for RuleBackend {
    fn backend_id(&self) -> String {
        "rules".into()
    }

    fn generate(&self, request: &ChatRequest, sample_index: u32) -> Result<String, rolefact::llm::LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let p = &request.user_prompt;
        Ok(match request.purpose {
            PurposeTag::Irg | PurposeTag::Baseline => self.response.clone(),
            PurposeTag::Dec | PurposeTag::Judge if p.contains("\nUtterance:\n") => self
                .facts
                .iter()
                .enumerate()
                .map(|(i, f)| format!("{}. {}", i + 1, f.0))
                .collect::<Vec<_>>()
                .join("\n"),
            PurposeTag::Fcr | PurposeTag::Judge => {
                let s = statement_of(p);
                let evidence = p.split("Evidence Knowledge:\n").nth(1).unwrap_or("");
                let ok = self
                    .facts
                    .iter()
                    .find(|f| f.0 == s)
                    .is_some_and(|f| f.1.iter().any(|id| evidence_has(evidence, id)));
                verdict(ok)
            }
            PurposeTag::Fcs => {
                let s = p.rsplit("Statement: ").next().unwrap_or("");
                let ok = self
                    .self_checks
                    .get(s)
                    .and_then(|v| v.get(sample_index as usize).copied())
                    .unwrap_or(false);
                verdict(ok)
            }
            PurposeTag::Sru => "Rewritten.".into(),
            PurposeTag::Segment => String::new(),
            PurposeTag::Dec => String::new(),
        })
    }
}

/// Evidence lines carry `t=<time>`; rule-backend doc ids are `t<time>`.
fn evidence_has(evidence: &str, doc_id: &str) -> bool {
    let t = doc_id.trim_start_matches('t');
    evidence.lines().any(|l| l.contains(&format!(", t={t}]")))
}

fn verdict(ok: bool) -> String {
    if ok {
        "Supported. Consistent.".into()
    } else {
        "Not Supported. No evidence.".into()
    }
}

// ---- fake OpenAI-compatible server ----------------------------------------

pub struct Reply {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Reply {
    pub fn ok(content: &str) -> Self {
        Reply {
            status: 200,
            headers: vec![],
            body: json!({
                "id": "x",
                "object": "chat.completion",
                "choices": [{ "index": 0, "message": { "role": "assistant", "content": content }, "finish_reason": "stop" }]
            })
            .to_string(),
        }
    }

    pub fn status(status: u16, body: &str) -> Self {
        Reply {
            status,
            headers: vec![],
            body: body.to_string(),
        }
    }
}

type Handler = dyn Fn(usize, &Value) -> Reply + Send + Sync;

pub struct FakeServer {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
    pub max_concurrent: Arc<AtomicUsize>,
    pub bodies: Arc<Mutex<Vec<Value>>>,
}

impl FakeServer {
    /// `handler(request_number, body)`; `delay` is applied before replying so
    /// concurrency is observable.
    pub fn start(delay: Duration, handler: impl Fn(usize, &Value) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let max_concurrent = Arc::new(AtomicUsize::new(0));
        let current = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        {
            let (requests, max_concurrent, bodies) = (requests.clone(), max_concurrent.clone(), bodies.clone());
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let (requests, max_concurrent, current, bodies, handler) = (
                        requests.clone(),
                        max_concurrent.clone(),
                        current.clone(),
                        bodies.clone(),
                        handler.clone(),
                    );
                    thread::spawn(move || {
                        serve_connection(stream, delay, &requests, &max_concurrent, &current, &bodies, &*handler)
                    });
                }
            });
        }
        FakeServer {
            url,
            requests,
            max_concurrent,
            bodies,
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

fn serve_connection(
    stream: TcpStream,
    delay: Duration,
    requests: &AtomicUsize,
    max_concurrent: &AtomicUsize,
    current: &AtomicUsize,
    bodies: &Mutex<Vec<Value>>,
    handler: &Handler,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut stream = stream;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let mut length = 0usize;
        loop {
            let mut h = String::new();
            if reader.read_line(&mut h).unwrap_or(0) == 0 {
                return;
            }
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            if let Some((k, v)) = h.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        let n = requests.fetch_add(1, Ordering::SeqCst);
        let now = current.fetch_add(1, Ordering::SeqCst) + 1;
        max_concurrent.fetch_max(now, Ordering::SeqCst);
        bodies.lock().unwrap().push(body.clone());
        thread::sleep(delay);
        let reply = handler(n, &body);
        current.fetch_sub(1, Ordering::SeqCst);
        let mut out = format!(
            "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n",
            reply.status,
            reply.body.len()
        );
        for (k, v) in &reply.headers {
            out.push_str(&format!("{k}: {v}\r\n"));
        }
        out.push_str("\r\n");
        out.push_str(&reply.body);
        if stream.write_all(out.as_bytes()).is_err() {
            return;
        }
    }
}

/// Replays the scripted fixtures over HTTP. The stage is recovered from the
/// prompt text and the sample index from the per-sample seed (base seed 0).
pub fn scripted_reply(mock: &ScriptedMock, body: &Value) -> Reply {
    let user = body["messages"]
        .as_array()
        .and_then(|m| m.iter().find(|m| m["role"] == "user"))
        .and_then(|m| m["content"].as_str())
        .unwrap_or("")
        .to_string();
    let purpose = if user.starts_with("You will role-play") {
        PurposeTag::Irg
    } else if user.starts_with("I will give you an utterance") {
        PurposeTag::Dec
    } else if user.starts_with("Consider the given statement and the evidence") {
        PurposeTag::Fcr
    } else if user.starts_with("Consider the given statement by") {
        PurposeTag::Fcs
    } else {
        PurposeTag::Sru
    };
    let sample = body["seed"].as_u64().unwrap_or(0) as u32;
    let request = ChatRequest::new(purpose, user, GenerationParams::deterministic());
    match mock.lookup(&request, sample) {
        Some(f) => Reply::ok(&f.response_text),
        None => Reply::status(404, "{\"error\":\"no fixture\"}"),
    }
}
