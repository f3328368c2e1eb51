use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ModelTag;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub backend_id: String,
    pub model: ModelTag,
    pub caption: String,
    pub image: Option<String>,
    pub candidate: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedProbability {
    pub probability: f64,
    pub model_id: String,
    pub retrieved_at: DateTime<Utc>,
}

/// One line of the on-disk cache.
#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    backend_id: String,
    model: ModelTag,
    caption: String,
    image: Option<String>,
    candidate: String,
    probability: f64,
    model_id: String,
    retrieved_at: DateTime<Utc>,
}

/// Per-candidate probability cache, optionally persisted as an append-only
/// JSON-lines file. Reads take a shared lock; all writes go through one
/// mutex-guarded writer.
#[derive(Debug, Default)]
pub struct ProbabilityCache {
    entries: RwLock<HashMap<CacheKey, CachedProbability>>,
    writer: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl ProbabilityCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a persisted cache. Lines that do not parse are
    /// dropped with a warning; a truncated final line is terminated so new
    /// records start on a fresh line.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| CacheError::Io {
            path: path.clone(),
            source,
        };
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err)?;
        let text = String::from_utf8_lossy(&bytes);

        let mut entries = HashMap::new();
        let mut dropped = 0usize;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheLine>(line) {
                Ok(l) => {
                    entries.insert(
                        CacheKey {
                            backend_id: l.backend_id,
                            model: l.model,
                            caption: l.caption,
                            image: l.image,
                            candidate: l.candidate,
                        },
                        CachedProbability {
                            probability: l.probability,
                            model_id: l.model_id,
                            retrieved_at: l.retrieved_at,
                        },
                    );
                }
                Err(e) => {
                    dropped += 1;
                    log::warn!(
                        "{}:{}: dropping corrupt cache line ({e})",
                        path.display(),
                        idx + 1
                    );
                }
            }
        }
        if dropped > 0 {
            log::warn!(
                "{}: dropped {dropped} corrupt cache line(s)",
                path.display()
            );
        }
        if !bytes.is_empty() && bytes.last() != Some(&b'\n') {
            file.seek(SeekFrom::End(0)).map_err(io_err)?;
            file.write_all(b"\n").map_err(io_err)?;
        }
        Ok(Self {
            entries: RwLock::new(entries),
            writer: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &CacheKey) -> Option<CachedProbability> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a batch of probabilities obtained from one wire request.
    pub fn insert_all(
        &self,
        items: impl IntoIterator<Item = (CacheKey, CachedProbability)>,
    ) -> Result<(), CacheError> {
        let items: Vec<_> = items.into_iter().collect();
        if let Some(writer) = &self.writer {
            let mut w = writer.lock().unwrap();
            for (key, value) in &items {
                let line = CacheLine {
                    backend_id: key.backend_id.clone(),
                    model: key.model,
                    caption: key.caption.clone(),
                    image: key.image.clone(),
                    candidate: key.candidate.clone(),
                    probability: value.probability,
                    model_id: value.model_id.clone(),
                    retrieved_at: value.retrieved_at,
                };
                let json = serde_json::to_string(&line).expect("cache line serializes");
                writeln!(w, "{json}").map_err(|source| self.io_error(source))?;
            }
            w.flush().map_err(|source| self.io_error(source))?;
        }
        let mut entries = self.entries.write().unwrap();
        entries.extend(items);
        Ok(())
    }

    fn io_error(&self, source: std::io::Error) -> CacheError {
        CacheError::Io {
            path: self.path.clone().unwrap_or_default(),
            source,
        }
    }
}
