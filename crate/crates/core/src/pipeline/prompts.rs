//! Prompt templates for the five pipeline stages and parsers for their outputs.

use std::sync::OnceLock;

use regex::Regex;

use crate::retrieval::Document;

pub const ANONYMOUS_ROLE: &str = "Character A";
pub const ANONYMOUS_STORY: &str = "an untitled story";
pub const NO_SCENES: &str = "(none)";

/// Appended to both fact-check prompts so the verdict is machine-readable.
pub const VERDICT_INSTRUCTION: &str =
    "Answer with exactly 'Supported' or 'Not Supported' followed by one sentence of reasoning.";

/// Who is being played, and in which story.
#[derive(Debug, Clone, Copy)]
pub struct Role<'a> {
    pub name: &'a str,
    pub story_title: &'a str,
}

fn scene_block(docs: &[Document]) -> String {
    if docs.is_empty() {
        return NO_SCENES.to_string();
    }
    docs.iter()
        .map(Document::prompt_line)
        .collect::<Vec<_>>()
        .join("\n")
}

fn with_period(s: &str) -> String {
    let s = s.trim_end();
    if s.ends_with(['.', '!', '?']) {
        s.to_string()
    } else {
        format!("{s}.")
    }
}

/// Intermediate response generation. `profile: None` drops the profile
/// sentence; `scenes: None` drops the relevant-scenes sentence.
pub fn render_irg_prompt(
    role: Role<'_>,
    query: &str,
    profile: Option<&str>,
    scenes: Option<&[Document]>,
    anonymize: bool,
) -> String {
    let Role { name, story_title } = role;
    let mut out = format!(
        "You will role-play as {name} from {story_title}. Your task is to respond to the following dialogue context. \
If the question matches a scene from your storyline, please reuse the original lines from the story. \
You will respond and answer like {name} using the tone, manner, and vocabulary {name} would use."
    );
    if let Some(p) = profile {
        out.push_str("\nYour character description is: ");
        out.push_str(&with_period(p));
    }
    if let Some(docs) = scenes {
        out.push_str("\nRelevant scenes for the given context are as follows:\n");
        out.push_str(&scene_block(docs));
    }
    out.push_str("\nDialogue context:\n");
    out.push_str(query.trim_end());
    if anonymize {
        anonymize_text(&out, name, story_title)
    } else {
        out
    }
}

fn name_pattern(name: &str) -> Option<Regex> {
    let name = name.trim();
    if name.is_empty() {
        return None;
    }
    let word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
    let lead = if word(name.chars().next()) { r"\b" } else { "" };
    let tail = if word(name.chars().last()) { r"\b" } else { "" };
    Regex::new(&format!("(?i){lead}{}{tail}", regex::escape(name))).ok()
}

/// Replaces the story title, then the role name, case-insensitively.
/// The title goes first because titles often contain the name.
pub fn anonymize_text(text: &str, role_name: &str, story_title: &str) -> String {
    let mut out = text.to_string();
    for (needle, replacement) in [(story_title, ANONYMOUS_STORY), (role_name, ANONYMOUS_ROLE)] {
        if let Some(re) = name_pattern(needle) {
            out = re.replace_all(&out, regex::NoExpand(replacement)).into_owned();
        }
    }
    out
}

pub fn render_dec_prompt(utterance: &str) -> String {
    format!(
        "I will give you an utterance from a movie or a play. Your task is to provide me with a list of atomic facts \
expressed in the given utterance. Each atomic fact should be described in a name-only third-person format.\n\
Utterance:\n{}",
        utterance.trim_end()
    )
}

pub fn render_fcr_prompt(statement: &str, evidence: &[Document]) -> String {
    format!(
        "Consider the given statement and the evidence knowledge sources. Indicate whether the statement is supported \
by the knowledge sources. Negation of a false statement should be considered supported. {VERDICT_INSTRUCTION}\n\
Statement: {statement}\n\
Evidence Knowledge:\n{}",
        scene_block(evidence)
    )
}

pub fn render_fcs_prompt(role: Role<'_>, statement: &str) -> String {
    let Role { name, story_title } = role;
    format!(
        "Consider the given statement by {name} from {story_title}. Indicate whether the statement is supported by \
the storyline of {story_title}. Negation of a false statement should be considered supported. {VERDICT_INSTRUCTION}\n\
Statement: {statement}"
    )
}

pub fn render_sru_prompt(role: Role<'_>, query: &str, response: &str, unsupported: &[&str]) -> String {
    let Role { name, story_title } = role;
    let claims = unsupported
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {c}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    format!(
        "Consider the following response generated by an AI role-playing as {name} from {story_title}. The response \
may contain one or more unsupported claims as a result of hallucination. The unsupported claims are listed below. \
Rewrite the response to remove all the unsupported claims from the response. If the hallucination stems from a wrong \
assertion made in the original query, feel free to clarify that.\n\
Original query:\n{}\n\
Response:\n{}\n\
Unsupported Claims:\n{claims}",
        query.trim_end(),
        response.trim_end()
    )
}

/// Multi-turn dialogue context: one `SPEAKER: text` line per turn.
pub fn render_dialogue<S: AsRef<str>, T: AsRef<str>>(turns: &[(S, T)]) -> String {
    turns
        .iter()
        .map(|(s, t)| format!("{}: {}", s.as_ref(), t.as_ref().trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn list_item() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+[.)]|[-*•])\s+(.*\S)\s*$").expect("valid regex"))
}

/// Numbered (`1. x`, `2) x`) or bulleted (`- x`, `* x`) lines. Anything else is ignored.
pub fn parse_fact_list(completion: &str) -> Vec<String> {
    completion
        .lines()
        .filter_map(|line| list_item().captures(line))
        .map(|c| c[1].trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Supported,
    NotSupported,
    Unparseable,
}

impl Verdict {
    /// Unparseable verdicts count as unsupported.
    pub fn is_supported(self) -> bool {
        self == Verdict::Supported
    }
}

/// First decisive word wins: `yes`/`supported` versus `no`/`unsupported`/`not supported`.
pub fn parse_verdict(completion: &str) -> Verdict {
    let words: Vec<String> = completion
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    for (i, w) in words.iter().enumerate() {
        match w.as_str() {
            "yes" | "supported" => return Verdict::Supported,
            "no" | "unsupported" => return Verdict::NotSupported,
            "not" if words.get(i + 1).is_some_and(|n| n == "supported") => {
                return Verdict::NotSupported
            }
            _ => {}
        }
    }
    Verdict::Unparseable
}
