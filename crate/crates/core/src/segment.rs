//! Model-assisted segmentation of raw script text into knowledge events.
//!
//! The model is asked to rewrite the script one unit per line:
//!
//! ```text
//! SCENE
//! ACTION: Hiccup walks into the forge.
//! SPEECH: GOBBER: You're late.
//! ```
//!
//! `SCENE` starts a new scene (a leading marker is a no-op). Times are
//! assigned as a running event index from zero.

use thiserror::Error;

use crate::knowledge_base::{EventKind, KbError, KnowledgeEvent};
use crate::llm::{ChatRequest, GenerationParams, LlmClient, LlmError, PurposeTag};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("segmentation backend failed: {0}")]
    Backend(#[from] LlmError),
    #[error("segmentation output line {line}: cannot parse {content:?}")]
    Malformed { line: usize, content: String },
    #[error("segmentation output contains no events")]
    Empty,
    #[error(transparent)]
    Invalid(#[from] KbError),
}

pub fn render_segment_prompt(raw_script: &str) -> String {
    format!(
        "Split the following script into scenes and knowledge events. Output one item per line and nothing else. \
Write SCENE on its own line at the start of every scene. Write each line of dialogue as \
SPEECH: <CHARACTER NAME IN CAPITALS>: <exact line>. Write each stage direction or action description as \
ACTION: <text>. Keep the original order and wording.\n\
Script:\n{}",
        raw_script.trim_end()
    )
}

/// Parses segmentation output into events for `story_id`.
pub fn parse_segmentation(story_id: &str, output: &str) -> Result<Vec<KnowledgeEvent>, SegmentError> {
    let mut events: Vec<KnowledgeEvent> = Vec::new();
    let mut scene: u32 = 0;
    for (i, raw) in output.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with("```") {
            continue;
        }
        let malformed = || SegmentError::Malformed {
            line: i + 1,
            content: raw.to_string(),
        };
        if line.eq_ignore_ascii_case("scene") {
            if !events.is_empty() && events.last().is_some_and(|e| e.scene_index == scene) {
                scene += 1;
            }
            continue;
        }
        let (tag, rest) = line.split_once(':').ok_or_else(malformed)?;
        let (kind, speaker, text) = match tag.trim().to_ascii_uppercase().as_str() {
            "SPEECH" => {
                let (speaker, text) = rest.split_once(':').ok_or_else(malformed)?;
                let speaker = speaker.trim();
                if speaker.is_empty() {
                    return Err(malformed());
                }
                (EventKind::Speech, Some(speaker.to_string()), text.trim())
            }
            "ACTION" => (EventKind::NonSpeech, None, rest.trim()),
            _ => return Err(malformed()),
        };
        if text.is_empty() {
            return Err(malformed());
        }
        let time = events.len() as u64;
        let event = KnowledgeEvent {
            event_id: format!("{story_id}-{time:06}"),
            story_id: story_id.to_string(),
            scene_index: scene,
            time,
            kind,
            speaker,
            text: text.to_string(),
        };
        event.validate()?;
        events.push(event);
    }
    if events.is_empty() {
        return Err(SegmentError::Empty);
    }
    Ok(events)
}

/// Segments `raw_script` with the model and returns validated events.
pub fn segment_script(
    client: &LlmClient,
    story_id: &str,
    raw_script: &str,
) -> Result<Vec<KnowledgeEvent>, SegmentError> {
    let request = ChatRequest::new(
        PurposeTag::Segment,
        render_segment_prompt(raw_script),
        GenerationParams {
            max_tokens: 4096,
            ..GenerationParams::deterministic()
        },
    );
    let response = client.complete(&request)?;
    parse_segmentation(story_id, &response.text)
}
