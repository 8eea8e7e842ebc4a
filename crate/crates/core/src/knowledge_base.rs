//! Time-indexed script corpus: stories, their knowledge events, and character profiles.
//!
//! A corpus is a set of JSONL files. Each line is one record:
//!
//! ```text
//! {"record":"story","story_id":"hp","title":"Harry Potter","scripts":["hp1.txt"]}
//! {"record":"event","event_id":"hp-0","story_id":"hp","scene_index":0,"time":0,"kind":"speech","speaker":"HARRY","text":"..."}
//! {"record":"profile","story_id":"hp","character":"HARRY","description":"..."}
//! ```
//!
//! `story` records are optional; a story without one takes its id as title.
//! Unknown fields are ignored.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

/// Story time: running event index from the start of the story.
pub type StoryTime = u64;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("event {event_id}: {message}")]
    InvalidEvent { event_id: String, message: String },
    #[error("story {story_id}: {message}")]
    InvalidStory { story_id: String, message: String },
    #[error("profile ({story_id}, {character}): {message}")]
    InvalidProfile {
        story_id: String,
        character: String,
        message: String,
    },
    #[error("no corpus files found under {0}")]
    Empty(PathBuf),
    #[error("unknown story: {0}")]
    UnknownStory(String),
    #[error("no profile for character {character} in story {story_id}")]
    UnknownProfile { story_id: String, character: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Speech,
    NonSpeech,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEvent {
    pub event_id: String,
    pub story_id: String,
    pub scene_index: u32,
    pub time: StoryTime,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    pub text: String,
}

impl KnowledgeEvent {
    /// Checks the per-event invariants that do not depend on neighbouring events.
    pub fn validate(&self) -> Result<(), KbError> {
        let fail = |message: &str| {
            Err(KbError::InvalidEvent {
                event_id: self.event_id.clone(),
                message: message.to_string(),
            })
        };
        if self.event_id.trim().is_empty() {
            return fail("empty event_id");
        }
        if self.text.trim().is_empty() {
            return fail("empty text");
        }
        match (self.kind, self.speaker.as_deref()) {
            (EventKind::Speech, None) => fail("speech event without speaker"),
            (EventKind::Speech, Some(s)) if s.trim().is_empty() => {
                fail("speech event with empty speaker")
            }
            (EventKind::NonSpeech, Some(_)) => fail("non_speech event with a speaker"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub story_id: String,
    pub title: String,
    pub scripts: Vec<String>,
    pub events: Vec<KnowledgeEvent>,
    pub characters: BTreeSet<String>,
}

impl Story {
    pub fn max_time(&self) -> Option<StoryTime> {
        self.events.last().map(|e| e.time)
    }

    /// Number of speech events per character, used for popularity ranking.
    pub fn speech_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> =
            self.characters.iter().map(|c| (c.clone(), 0)).collect();
        for speaker in self.events.iter().filter_map(|e| e.speaker.as_ref()) {
            *counts.entry(speaker.clone()).or_default() += 1;
        }
        counts
    }

    /// Characters ordered by descending speech-event count (rank 1 first).
    /// Ties are broken by name.
    pub fn popularity_ranking(&self) -> Vec<(String, usize)> {
        let mut ranked: Vec<_> = self.speech_counts().into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked
    }

    pub fn popularity_rank(&self, character: &str) -> Option<u32> {
        self.popularity_ranking()
            .iter()
            .position(|(c, _)| c == character)
            .map(|i| i as u32 + 1)
    }

    /// `(scene_index, min_time, max_time)` for each scene, in story order.
    pub fn timeline(&self) -> Vec<(u32, StoryTime, StoryTime)> {
        let mut out: Vec<(u32, StoryTime, StoryTime)> = Vec::new();
        for e in &self.events {
            match out.last_mut() {
                Some(last) if last.0 == e.scene_index => last.2 = e.time,
                _ => out.push((e.scene_index, e.time, e.time)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub story_id: String,
    pub character: String,
    pub description: String,
}

/// Immutable corpus view. Shareable across threads once loaded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    stories: BTreeMap<String, Story>,
    profiles: BTreeMap<(String, String), CharacterProfile>,
    warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Story {
        story_id: String,
        #[serde(default)]
        title: Option<String>,
        #[serde(default)]
        scripts: Vec<String>,
    },
    Event(KnowledgeEvent),
    Profile(CharacterProfile),
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum RecordOut<'a> {
    Story {
        story_id: &'a str,
        title: &'a str,
        scripts: &'a [String],
    },
    Event(&'a KnowledgeEvent),
    Profile(&'a CharacterProfile),
}

/// Loads a corpus from a single JSONL file or from every `*.jsonl` file in a
/// directory (sorted by file name).
pub fn load_corpus(path: impl AsRef<Path>) -> Result<KnowledgeBase, KbError> {
    let path = path.as_ref();
    let files = corpus_files(path)?;
    let mut builder = CorpusBuilder::default();
    for file in &files {
        let f = fs::File::open(file).map_err(|source| KbError::Io {
            path: file.clone(),
            source,
        })?;
        builder.read(file, BufReader::new(f))?;
    }
    builder.finish()
}

/// Parses a corpus from in-memory JSONL text. `origin` is only used in error messages.
pub fn parse_corpus(origin: impl AsRef<Path>, text: &str) -> Result<KnowledgeBase, KbError> {
    let mut builder = CorpusBuilder::default();
    builder.read(origin.as_ref(), text.as_bytes())?;
    builder.finish()
}

/// Parses several in-memory JSONL sources as one corpus, reporting errors
/// against each source's own path and line numbers.
pub fn parse_corpus_sources(sources: &[(PathBuf, String)]) -> Result<KnowledgeBase, KbError> {
    let mut builder = CorpusBuilder::default();
    for (origin, text) in sources {
        builder.read(origin, text.as_bytes())?;
    }
    builder.finish()
}

fn corpus_files(path: &Path) -> Result<Vec<PathBuf>, KbError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|source| KbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(KbError::Empty(path.to_path_buf()));
    }
    Ok(files)
}

#[derive(Default)]
struct CorpusBuilder {
    headers: BTreeMap<String, (String, Vec<String>)>,
    events: BTreeMap<String, Vec<KnowledgeEvent>>,
    profiles: Vec<CharacterProfile>,
}

impl CorpusBuilder {
    fn read(&mut self, origin: &Path, reader: impl BufRead) -> Result<(), KbError> {
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|source| KbError::Io {
                path: origin.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line).map_err(|e| KbError::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
            match record {
                Record::Story {
                    story_id,
                    title,
                    scripts,
                } => {
                    let title = title.unwrap_or_else(|| story_id.clone());
                    self.headers.insert(story_id, (title, scripts));
                }
                Record::Event(event) => {
                    event.validate().map_err(|e| KbError::Parse {
                        path: origin.to_path_buf(),
                        line: line_no,
                        message: e.to_string(),
                    })?;
                    self.events
                        .entry(event.story_id.clone())
                        .or_default()
                        .push(event);
                }
                Record::Profile(profile) => self.profiles.push(profile),
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<KnowledgeBase, KbError> {
        let mut stories = BTreeMap::new();
        let mut seen_ids = HashSet::new();
        for (story_id, events) in self.events {
            validate_story_events(&events, &mut seen_ids)?;
            let characters: BTreeSet<String> =
                events.iter().filter_map(|e| e.speaker.clone()).collect();
            let (title, scripts) = self
                .headers
                .get(&story_id)
                .cloned()
                .unwrap_or_else(|| (story_id.clone(), Vec::new()));
            stories.insert(
                story_id.clone(),
                Story {
                    story_id,
                    title,
                    scripts,
                    events,
                    characters,
                },
            );
        }
        if let Some(story_id) = self.headers.keys().find(|id| !stories.contains_key(*id)) {
            return Err(KbError::InvalidStory {
                story_id: story_id.clone(),
                message: "story has no events".into(),
            });
        }

        let mut profiles = BTreeMap::new();
        for profile in self.profiles {
            let key = (profile.story_id.clone(), profile.character.clone());
            let invalid = |message: &str| KbError::InvalidProfile {
                story_id: key.0.clone(),
                character: key.1.clone(),
                message: message.to_string(),
            };
            let Some(story) = stories.get_mut(&profile.story_id) else {
                return Err(invalid("profile references an unknown story"));
            };
            if profile.description.trim().is_empty() {
                return Err(invalid("empty description"));
            }
            if profiles.contains_key(&key) {
                return Err(invalid("duplicate profile"));
            }
            story.characters.insert(profile.character.clone());
            profiles.insert(key, profile);
        }

        let mut warnings = Vec::new();
        for story in stories.values() {
            for character in &story.characters {
                if !profiles.contains_key(&(story.story_id.clone(), character.clone())) {
                    let msg = format!(
                        "story {}: character {character} has no profile",
                        story.story_id
                    );
                    warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }

        Ok(KnowledgeBase {
            stories,
            profiles,
            warnings,
        })
    }
}

fn validate_story_events(
    events: &[KnowledgeEvent],
    seen_ids: &mut HashSet<String>,
) -> Result<(), KbError> {
    let mut prev: Option<&KnowledgeEvent> = None;
    for event in events {
        event.validate()?;
        if !seen_ids.insert(event.event_id.clone()) {
            return Err(KbError::InvalidEvent {
                event_id: event.event_id.clone(),
                message: "duplicate event_id".into(),
            });
        }
        if let Some(p) = prev {
            if event.time <= p.time {
                return Err(KbError::InvalidEvent {
                    event_id: event.event_id.clone(),
                    message: format!(
                        "time {} is not strictly greater than previous time {} (event {})",
                        event.time, p.time, p.event_id
                    ),
                });
            }
            if event.scene_index < p.scene_index {
                return Err(KbError::InvalidEvent {
                    event_id: event.event_id.clone(),
                    message: format!(
                        "scene_index {} decreases from {}",
                        event.scene_index, p.scene_index
                    ),
                });
            }
        }
        prev = Some(event);
    }
    Ok(())
}

impl KnowledgeBase {
    pub fn stories(&self) -> impl Iterator<Item = &Story> {
        self.stories.values()
    }

    pub fn story(&self, story_id: &str) -> Result<&Story, KbError> {
        self.stories
            .get(story_id)
            .ok_or_else(|| KbError::UnknownStory(story_id.to_string()))
    }

    pub fn profiles(&self) -> impl Iterator<Item = &CharacterProfile> {
        self.profiles.values()
    }

    /// Non-fatal issues found while loading (currently: characters without a profile).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn get_profile(&self, story_id: &str, character: &str) -> Result<&CharacterProfile, KbError> {
        self.story(story_id)?;
        self.profiles
            .get(&(story_id.to_string(), character.to_string()))
            .ok_or_else(|| KbError::UnknownProfile {
                story_id: story_id.to_string(),
                character: character.to_string(),
            })
    }

    /// Events with `time <= cutoff`, in story order. `None` yields the whole story.
    pub fn events_up_to(
        &self,
        story_id: &str,
        cutoff: Option<StoryTime>,
    ) -> Result<&[KnowledgeEvent], KbError> {
        let events = &self.story(story_id)?.events;
        Ok(match cutoff {
            None => events,
            Some(c) => &events[..events.partition_point(|e| e.time <= c)],
        })
    }

    /// Serializes the corpus back to JSONL: story headers, then events, then profiles.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |record: RecordOut<'_>| {
            out.push_str(&serde_json::to_string(&record).expect("corpus records serialize"));
            out.push('\n');
        };
        for story in self.stories.values() {
            push(RecordOut::Story {
                story_id: &story.story_id,
                title: &story.title,
                scripts: &story.scripts,
            });
        }
        for story in self.stories.values() {
            for event in &story.events {
                push(RecordOut::Event(event));
            }
        }
        for profile in self.profiles.values() {
            push(RecordOut::Profile(profile));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(id: &str, time: u64, scene: u32, speaker: Option<&str>) -> String {
        let kind = if speaker.is_some() { "speech" } else { "non_speech" };
        let speaker = speaker
            .map(|s| format!(r#","speaker":"{s}""#))
            .unwrap_or_default();
        format!(
            r#"{{"record":"event","event_id":"{id}","story_id":"s","scene_index":{scene},"time":{time},"kind":"{kind}"{speaker},"text":"line {id}"}}"#
        )
    }

    fn corpus(lines: &[String]) -> Result<KnowledgeBase, KbError> {
        parse_corpus("test.jsonl", &lines.join("\n"))
    }

    #[test]
    fn loads_minimal_corpus() {
        let kb = corpus(&[
            event("e0", 0, 0, Some("A")),
            event("e1", 1, 0, None),
            event("e2", 2, 1, Some("B")),
        ])
        .unwrap();
        assert_eq!(kb.stories().count(), 1);
        let story = kb.story("s").unwrap();
        assert_eq!(story.events.len(), 3);
        assert_eq!(story.title, "s");
        assert_eq!(kb.warnings().len(), 2);
    }

    #[test]
    fn rejects_non_monotone_time() {
        let err = corpus(&[
            event("e0", 0, 0, None),
            event("e1", 2, 0, None),
            event("e2", 1, 0, None),
        ])
        .unwrap_err();
        match err {
            KbError::InvalidEvent { event_id, .. } => assert_eq!(event_id, "e2"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_speech_without_speaker() {
        let line = r#"{"record":"event","event_id":"x","story_id":"s","scene_index":0,"time":0,"kind":"speech","text":"hi"}"#;
        let err = parse_corpus("t", line).unwrap_err();
        assert!(matches!(err, KbError::Parse { line: 1, ref message, .. } if message.contains("event x")));
    }

    #[test]
    fn rejects_decreasing_scene() {
        let err = corpus(&[event("e0", 0, 1, None), event("e1", 1, 0, None)]).unwrap_err();
        assert!(matches!(err, KbError::InvalidEvent { ref event_id, .. } if event_id == "e1"));
    }

    #[test]
    fn parse_error_reports_line() {
        let err = parse_corpus("c.jsonl", &format!("{}\n{{nope", event("e0", 0, 0, None)))
            .unwrap_err();
        assert!(matches!(err, KbError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn events_up_to_is_inclusive() {
        let kb = corpus(&[
            event("a", 0, 0, None),
            event("b", 3, 0, None),
            event("c", 5, 1, None),
            event("d", 9, 2, None),
        ])
        .unwrap();
        let times = |c| {
            kb.events_up_to("s", c)
                .unwrap()
                .iter()
                .map(|e| e.time)
                .collect::<Vec<_>>()
        };
        assert_eq!(times(Some(5)), vec![0, 3, 5]);
        assert_eq!(times(None), vec![0, 3, 5, 9]);
        assert_eq!(times(Some(0)), vec![0]);
        assert!(matches!(
            kb.events_up_to("zz", None),
            Err(KbError::UnknownStory(_))
        ));
    }

    #[test]
    fn profiles_and_titles() {
        let lines = [
            r#"{"record":"story","story_id":"s","title":"The Story","scripts":["one.txt"],"extra":1}"#.to_string(),
            event("e0", 0, 0, Some("HARRY")),
            r#"{"record":"profile","story_id":"s","character":"HARRY","description":"A wizard."}"#.to_string(),
        ];
        let kb = corpus(&lines).unwrap();
        assert_eq!(kb.story("s").unwrap().title, "The Story");
        assert_eq!(kb.get_profile("s", "HARRY").unwrap().description, "A wizard.");
        assert!(matches!(
            kb.get_profile("s", "RON"),
            Err(KbError::UnknownProfile { .. })
        ));
        assert!(kb.warnings().is_empty());
    }

    #[test]
    fn rejects_empty_profile_description() {
        let lines = [
            event("e0", 0, 0, Some("HARRY")),
            r#"{"record":"profile","story_id":"s","character":"HARRY","description":"  "}"#.to_string(),
        ];
        assert!(matches!(corpus(&lines), Err(KbError::InvalidProfile { .. })));
    }

    #[test]
    fn jsonl_round_trip() {
        let kb = corpus(&[
            event("e0", 0, 0, Some("A")),
            event("e1", 1, 1, None),
        ])
        .unwrap();
        let again = parse_corpus("again", &kb.to_jsonl()).unwrap();
        assert_eq!(kb, again);
    }

    #[test]
    fn timeline_and_popularity() {
        let kb = corpus(&[
            event("e0", 0, 0, Some("A")),
            event("e1", 1, 0, Some("B")),
            event("e2", 2, 1, Some("B")),
            event("e3", 3, 2, None),
        ])
        .unwrap();
        let story = kb.story("s").unwrap();
        assert_eq!(story.timeline(), vec![(0, 0, 1), (1, 2, 2), (2, 3, 3)]);
        assert_eq!(story.popularity_rank("B"), Some(1));
        assert_eq!(story.popularity_rank("A"), Some(2));
    }
}
