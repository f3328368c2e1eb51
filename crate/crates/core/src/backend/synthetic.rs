use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use chrono::{DateTime, Utc};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{BackendError, Fetched, MaskedLm, ModelTag, ProbeQuery};

const NO_IMAGE: &str = "NONE";

#[derive(Debug, Error)]
pub enum TableError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: probability {value} outside (0, 1]")]
    Range { line: usize, value: f64 },
    #[error("cannot read synthetic table: {0}")]
    Io(#[from] std::io::Error),
}

type TableKey = (String, Option<String>, ModelTag, String);

/// Probability lookup table keyed by caption, image id, model tag and
/// candidate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticTable {
    entries: HashMap<TableKey, f64>,
}

impl SyntheticTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry. Panics on probabilities outside (0, 1].
    pub fn insert(
        &mut self,
        caption: impl Into<String>,
        image: Option<&str>,
        model: ModelTag,
        candidate: impl Into<String>,
        probability: f64,
    ) {
        assert!(
            probability > 0.0 && probability <= 1.0,
            "synthetic probability {probability} outside (0, 1]"
        );
        self.entries.insert(
            (
                caption.into(),
                image.map(str::to_owned),
                model,
                candidate.into(),
            ),
            probability,
        );
    }

    pub fn get(
        &self,
        caption: &str,
        image: Option<&str>,
        model: ModelTag,
        candidate: &str,
    ) -> Option<f64> {
        // HashMap<(String, ..)> cannot be probed with borrowed tuples.
        self.entries
            .get(&(
                caption.to_owned(),
                image.map(str::to_owned),
                model,
                candidate.to_owned(),
            ))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TableKey, f64)> {
        self.entries.iter().map(|(k, &v)| (k, v))
    }

    /// Applies `f` to every probability.
    pub fn map_probabilities(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, &v)| (k.clone(), f(v)))
                .collect(),
        }
    }

    fn sorted(&self) -> BTreeMap<&TableKey, f64> {
        self.entries.iter().map(|(k, &v)| (k, v)).collect()
    }

    /// Serializes to the tab-separated file format, rows sorted by key.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ((caption, image, model, candidate), p) in self.sorted() {
            let _ = writeln!(
                out,
                "{caption}\t{}\t{model}\t{candidate}\t{p}",
                image.as_deref().unwrap_or(NO_IMAGE)
            );
        }
        out
    }

    /// Parses `caption<TAB>image_id|NONE<TAB>model<TAB>candidate<TAB>probability`
    /// rows. Blank lines and `#` comments are skipped.
    pub fn parse(input: &str) -> Result<Self, TableError> {
        let mut entries = HashMap::new();
        let mut first_seen: HashMap<TableKey, usize> = HashMap::new();
        for (idx, raw) in input.lines().enumerate() {
            let line = idx + 1;
            let raw = raw.strip_suffix('\r').unwrap_or(raw);
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let parse_err = |reason: String| TableError::Parse { line, reason };
            let fields: Vec<&str> = raw.split('\t').collect();
            let [caption, image, model, candidate, prob] = fields.as_slice() else {
                return Err(parse_err(format!(
                    "expected 5 tab-separated fields, found {}",
                    fields.len()
                )));
            };
            let model: ModelTag = model.parse().map_err(parse_err)?;
            let value: f64 = prob
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("`{prob}` is not a number")))?;
            if !(value > 0.0 && value <= 1.0) {
                return Err(TableError::Range { line, value });
            }
            let image = (*image != NO_IMAGE).then(|| image.to_string());
            if image.is_some() && model != ModelTag::VisionLanguage {
                return Err(parse_err(
                    "images are only valid for vision_language".into(),
                ));
            }
            let key = (caption.to_string(), image, model, candidate.to_string());
            if let Some(prev) = first_seen.insert(key.clone(), line) {
                return Err(parse_err(format!(
                    "duplicate key (first defined on line {prev})"
                )));
            }
            entries.insert(key, value);
        }
        Ok(Self { entries })
    }

    /// Content hash over the sorted rows; identifies the table in caches.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Backend answering only from a [`SyntheticTable`]. Deterministic: the
/// retrieval timestamp is always the Unix epoch.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    table: SyntheticTable,
    id: String,
}

impl SyntheticBackend {
    pub fn new(table: SyntheticTable) -> Self {
        let id = format!("synthetic-{}", table.fingerprint());
        Self { table, id }
    }

    pub fn table(&self) -> &SyntheticTable {
        &self.table
    }
}

impl MaskedLm for SyntheticBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn fetch(&self, probe: &ProbeQuery, candidates: &[String]) -> Result<Fetched, BackendError> {
        let mut probabilities = BTreeMap::new();
        let mut missing = Vec::new();
        for c in candidates {
            match self
                .table
                .get(&probe.caption, probe.image_id(), probe.model, c)
            {
                Some(p) => {
                    probabilities.insert(c.clone(), p);
                }
                None => missing.push(c.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(BackendError::TableMiss {
                candidates: missing,
            });
        }
        Ok(Fetched {
            probabilities,
            model_id: format!("synthetic/{}", probe.model),
        })
    }

    fn no_image_mechanism(&self) -> String {
        "synthetic table rows keyed with image NONE".into()
    }

    fn timestamp(&self) -> DateTime<Utc> {
        DateTime::UNIX_EPOCH
    }
}

pub fn load_synthetic_backend(path: impl AsRef<Path>) -> Result<SyntheticBackend, TableError> {
    let text = std::fs::read_to_string(path)?;
    Ok(SyntheticBackend::new(SyntheticTable::parse(&text)?))
}
