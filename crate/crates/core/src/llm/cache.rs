use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use tracing::warn;

const CACHE_FILE: &str = "responses.jsonl";

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    text: String,
}

/// Content-addressed completion cache, optionally persisted as an
/// append-only JSONL file.
#[derive(Debug)]
pub struct ResponseCache {
    inner: Mutex<Inner>,
}

#[derive(Debug)]
struct Inner {
    entries: HashMap<String, String>,
    file: Option<(PathBuf, File)>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            inner: Mutex::new(Inner {
                entries: HashMap::new(),
                file: None,
            }),
        }
    }

    /// Opens (or creates) the cache under `dir`. Corrupt lines, e.g. a torn
    /// final write, are skipped with a warning.
    pub fn open(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Entry>(&line) {
                    Ok(e) => {
                        entries.insert(e.key, e.text);
                    }
                    Err(e) => warn!("{}:{}: skipping cache line: {e}", path.display(), i + 1),
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        let len = file.metadata()?.len();
        if len > 0 && !fs::read(&path)?.ends_with(b"\n") {
            file.write_all(b"\n")?;
        }
        Ok(ResponseCache {
            inner: Mutex::new(Inner {
                entries,
                file: Some((path, file)),
            }),
        })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.inner.lock().expect("cache lock").entries.get(key).cloned()
    }

    pub fn insert(&self, key: &str, text: &str) -> std::io::Result<()> {
        let mut inner = self.inner.lock().expect("cache lock");
        if inner.entries.contains_key(key) {
            return Ok(());
        }
        if let Some((_, file)) = inner.file.as_mut() {
            let mut line = serde_json::to_string(&Entry {
                key: key.to_string(),
                text: text.to_string(),
            })
            .map_err(std::io::Error::other)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        inner.entries.insert(key.to_string(), text.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.inner
            .lock()
            .expect("cache lock")
            .file
            .as_ref()
            .map(|(p, _)| p.clone())
    }
}
