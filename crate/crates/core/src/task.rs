//! Interview tasks: the queries a character is asked, with their temporal scope.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge_base::StoryTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Adversarial,
    OpenEnded,
    DialogueCompletion,
    SceneGrounded,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [
        TaskType::Adversarial,
        TaskType::OpenEnded,
        TaskType::DialogueCompletion,
        TaskType::SceneGrounded,
    ];

    /// Time-sensitive tasks restrict the character to events up to a cutoff.
    pub fn requires_cutoff(self) -> bool {
        matches!(self, TaskType::DialogueCompletion | TaskType::SceneGrounded)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Adversarial => "adversarial",
            TaskType::OpenEnded => "open_ended",
            TaskType::DialogueCompletion => "dialogue_completion",
            TaskType::SceneGrounded => "scene_grounded",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterviewTask {
    pub task_id: String,
    pub task_type: TaskType,
    pub story_id: String,
    pub character: String,
    /// Question, or dialogue context as `SPEAKER: text` lines.
    #[serde(alias = "question", alias = "question_or_context")]
    pub query: String,
    #[serde(default)]
    pub cutoff: Option<StoryTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity_rank: Option<u32>,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Invalid {
        path: String,
        line: usize,
        message: String,
    },
}

impl InterviewTask {
    pub fn validate(&self) -> Result<(), String> {
        if self.task_id.trim().is_empty() {
            return Err("empty task_id".into());
        }
        if self.query.trim().is_empty() {
            return Err(format!("task {}: empty query", self.task_id));
        }
        match (self.task_type.requires_cutoff(), self.cutoff) {
            (true, None) => Err(format!(
                "task {}: {} tasks require a cutoff",
                self.task_id, self.task_type
            )),
            (false, Some(_)) => Err(format!(
                "task {}: {} tasks must not carry a cutoff",
                self.task_id, self.task_type
            )),
            _ if self.popularity_rank == Some(0) => {
                Err(format!("task {}: popularity_rank starts at 1", self.task_id))
            }
            _ => Ok(()),
        }
    }
}

pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<InterviewTask>, TaskError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_tasks(&path.display().to_string(), &text)
}

pub fn parse_tasks(origin: &str, text: &str) -> Result<Vec<InterviewTask>, TaskError> {
    let mut tasks = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |message: String| TaskError::Invalid {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let task: InterviewTask = serde_json::from_str(line).map_err(|e| invalid(e.to_string()))?;
        task.validate().map_err(invalid)?;
        if !ids.insert(task.task_id.clone()) {
            return Err(invalid(format!("duplicate task_id {}", task.task_id)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}
