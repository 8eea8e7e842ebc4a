//! Deterministic fixture-table backend.
//!
//! Fixture file: JSONL, one record per line:
//!
//! ```text
//! {"prompt_hash_or_match": "...", "sample_index": 0, "purpose": "fcs", "response_text": "..."}
//! ```
//!
//! `prompt_hash_or_match` is either the 64-hex-digit SHA-256 of the user
//! prompt (exact match) or a substring the user prompt must contain.
//! `sample_index` and `purpose` are optional filters. When several fixtures
//! match, the most specific wins: hash over substring, pinned sample index
//! over any, pinned purpose over any, longer substring over shorter, then
//! earlier line.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, LlmError, PurposeTag};

/// SHA-256 hex digest of a user prompt, as used by hash fixtures.
pub fn prompt_hash(user_prompt: &str) -> String {
    hex::encode(Sha256::digest(user_prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FixturePattern {
    Hash(String),
    Contains(String),
}

impl FixturePattern {
    pub fn parse(raw: &str) -> Self {
        if raw.len() == 64 && raw.bytes().all(|b| b.is_ascii_hexdigit()) {
            FixturePattern::Hash(raw.to_ascii_lowercase())
        } else {
            FixturePattern::Contains(raw.to_string())
        }
    }

    fn matches(&self, user_prompt: &str, hash: &str) -> bool {
        match self {
            FixturePattern::Hash(h) => h == hash,
            FixturePattern::Contains(s) => user_prompt.contains(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fixture {
    pub pattern: FixturePattern,
    pub sample_index: Option<u32>,
    pub purpose: Option<PurposeTag>,
    pub response_text: String,
}

impl Fixture {
    pub fn new(pattern: &str, response_text: impl Into<String>) -> Self {
        Fixture {
            pattern: FixturePattern::parse(pattern),
            sample_index: None,
            purpose: None,
            response_text: response_text.into(),
        }
    }

    pub fn purpose(mut self, purpose: PurposeTag) -> Self {
        self.purpose = Some(purpose);
        self
    }

    pub fn sample(mut self, index: u32) -> Self {
        self.sample_index = Some(index);
        self
    }

    fn specificity(&self) -> (bool, bool, bool, usize) {
        let (is_hash, len) = match &self.pattern {
            FixturePattern::Hash(_) => (true, 0),
            FixturePattern::Contains(s) => (false, s.len()),
        };
        (is_hash, self.sample_index.is_some(), self.purpose.is_some(), len)
    }
}

#[derive(Deserialize)]
struct FixtureRecord {
    prompt_hash_or_match: String,
    #[serde(default)]
    sample_index: Option<u32>,
    #[serde(default)]
    purpose: Option<PurposeTag>,
    response_text: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedMock {
    id: String,
    fixtures: Vec<Fixture>,
}

impl ScriptedMock {
    pub fn new(fixtures: Vec<Fixture>) -> Self {
        ScriptedMock {
            id: "scripted-mock".into(),
            fixtures,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LlmError> {
        Self::parse("<inline>", text)
    }

    fn parse(origin: &str, text: &str) -> Result<Self, LlmError> {
        let mut fixtures = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(line).map_err(|e| LlmError::Fixture {
                path: origin.to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            fixtures.push(Fixture {
                pattern: FixturePattern::parse(&rec.prompt_hash_or_match),
                sample_index: rec.sample_index,
                purpose: rec.purpose,
                response_text: rec.response_text,
            });
        }
        Ok(Self::new(fixtures))
    }

    pub fn push(&mut self, fixture: Fixture) {
        self.fixtures.push(fixture);
    }

    pub fn fixtures(&self) -> &[Fixture] {
        &self.fixtures
    }

    pub fn lookup(&self, request: &ChatRequest, sample_index: u32) -> Option<&Fixture> {
        let hash = prompt_hash(&request.user_prompt);
        let mut best: Option<&Fixture> = None;
        for f in &self.fixtures {
            if f.purpose.is_some_and(|p| p != request.purpose)
                || f.sample_index.is_some_and(|s| s != sample_index)
                || !f.pattern.matches(&request.user_prompt, &hash)
            {
                continue;
            }
            if best.is_none_or(|b| f.specificity() > b.specificity()) {
                best = Some(f);
            }
        }
        best
    }
}

impl ChatBackend for ScriptedMock {
    fn backend_id(&self) -> String {
        self.id.clone()
    }

    fn generate(&self, request: &ChatRequest, sample_index: u32) -> Result<String, LlmError> {
        self.lookup(request, sample_index)
            .map(|f| f.response_text.clone())
            .ok_or_else(|| LlmError::FixtureMiss {
                prompt_hash: prompt_hash(&request.user_prompt),
                purpose: request.purpose,
                sample_index,
            })
    }
}
