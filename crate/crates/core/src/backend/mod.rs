//! Masked-LM inference: the backend abstraction, its two implementations
//! (HTTP client and synthetic lookup table) and the caching prober that sits
//! in front of them.

mod cache;
mod http;
mod prober;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AgentGender, ImageRef, MASK_TOKEN};

pub use cache::{CacheError, CacheKey, CachedProbability, ProbabilityCache};
pub use http::{HttpBackend, WireError, WireRequest, WireResponse, MASK_PROBS_PATH};
pub use prober::{BatchReport, Prober, DEFAULT_PARALLELISM};
pub use synthetic::{load_synthetic_backend, SyntheticBackend, SyntheticTable, TableError};

/// Lower bound applied to every probability before it reaches a logarithm.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Tolerance on the candidate-probability sum of one record.
pub const SUBSET_SUM_TOLERANCE: f64 = 1e-6;

pub fn clamp_probability(p: f64) -> f64 {
    p.max(PROBABILITY_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    VisionLanguage,
    TextOnly,
}

impl ModelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::VisionLanguage => "vision_language",
            ModelTag::TextOnly => "text_only",
        }
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vision_language" => Ok(ModelTag::VisionLanguage),
            "text_only" => Ok(ModelTag::TextOnly),
            other => Err(format!("unknown model tag `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("vocabulary miss: {} not a single token", .candidates.join(", "))]
    VocabularyMiss { candidates: Vec<String> },
    #[error("synthetic table has no entry for {}", .candidates.join(", "))]
    TableMiss { candidates: Vec<String> },
    #[error("backend rejected caption: {0}")]
    MalformedCaption(String),
    #[error("backend does not know image `{0}`")]
    ImageNotFound(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid probe: {0}")]
    InvalidProbe(String),
    #[error("cache write failed: {0}")]
    Cache(String),
}

impl BackendError {
    /// Candidates the backend could not score as a single token, if this is
    /// a vocabulary (or synthetic table) miss.
    pub fn missed_candidates(&self) -> Option<&[String]> {
        match self {
            BackendError::VocabularyMiss { candidates }
            | BackendError::TableMiss { candidates } => Some(candidates),
            _ => None,
        }
    }
}

/// One fully resolved inference request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeQuery {
    pub caption: String,
    pub agent: AgentGender,
    pub template_id: String,
    pub image: Option<ImageRef>,
    pub model: ModelTag,
    pub candidates: Vec<String>,
}

impl ProbeQuery {
    pub fn new(
        caption: impl Into<String>,
        agent: AgentGender,
        template_id: impl Into<String>,
        image: Option<ImageRef>,
        model: ModelTag,
        candidates: Vec<String>,
    ) -> Result<Self, BackendError> {
        let probe = Self {
            caption: caption.into(),
            agent,
            template_id: template_id.into(),
            image,
            model,
            candidates,
        };
        probe.validate()?;
        Ok(probe)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |msg: &str| Err(BackendError::InvalidProbe(msg.to_owned()));
        if self.caption.matches(MASK_TOKEN).count() != 1 {
            return invalid("caption must contain exactly one [MASK]");
        }
        if self.image.is_some() && self.model != ModelTag::VisionLanguage {
            return invalid("an image requires the vision_language model");
        }
        if self.candidates.is_empty() {
            return invalid("candidate list is empty");
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.candidates.iter().all(|c| seen.insert(c)) {
            return invalid("candidates must be unique");
        }
        Ok(())
    }

    pub fn image_id(&self) -> Option<&str> {
        self.image.as_ref().map(|i| i.id.as_str())
    }

    /// Identity used for plan deduplication and record lookup.
    pub fn key(&self) -> ProbeKey {
        ProbeKey {
            model: self.model,
            caption: self.caption.clone(),
            image: self.image_id().map(str::to_owned),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProbeKey {
    pub model: ModelTag,
    pub caption: String,
    pub image: Option<String>,
}

/// What a backend returns for one wire request.
#[derive(Debug, Clone, PartialEq)]
pub struct Fetched {
    pub probabilities: BTreeMap<String, f64>,
    pub model_id: String,
}

/// Masked-token probability source. `fetch` is exactly one wire request.
pub trait MaskedLm: Send + Sync {
    fn backend_id(&self) -> &str;

    /// Probabilities at the mask position for `candidates` (a subset of
    /// `probe.candidates`).
    fn fetch(&self, probe: &ProbeQuery, candidates: &[String]) -> Result<Fetched, BackendError>;

    /// How the backend realises vision-language inference without an image.
    fn no_image_mechanism(&self) -> String;

    fn timestamp(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

impl<T: MaskedLm + ?Sized> MaskedLm for std::sync::Arc<T> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn fetch(&self, probe: &ProbeQuery, candidates: &[String]) -> Result<Fetched, BackendError> {
        (**self).fetch(probe, candidates)
    }

    fn no_image_mechanism(&self) -> String {
        (**self).no_image_mechanism()
    }

    fn timestamp(&self) -> DateTime<Utc> {
        (**self).timestamp()
    }
}

/// Extracted masked-token probabilities with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRecord {
    pub query: ProbeQuery,
    pub probabilities: BTreeMap<String, f64>,
    pub backend_id: String,
    pub model_id: String,
    pub retrieved_at: DateTime<Utc>,
}

impl ProbabilityRecord {
    pub fn probability(&self, candidate: &str) -> Option<f64> {
        self.probabilities.get(candidate).copied()
    }

    /// Candidate with the highest probability; ties go to the candidate
    /// that sorts first.
    pub fn argmax(&self) -> Option<(&str, f64)> {
        self.probabilities
            .iter()
            .fold(None, |best: Option<(&str, f64)>, (c, &p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((c.as_str(), p)),
            })
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let mut sum = 0.0;
        for candidate in &self.query.candidates {
            let p = self.probabilities.get(candidate).ok_or_else(|| {
                BackendError::Protocol(format!("no probability for candidate `{candidate}`"))
            })?;
            if !(0.0..=1.0).contains(p) {
                return Err(BackendError::Protocol(format!(
                    "probability {p} for `{candidate}` outside [0, 1]"
                )));
            }
            sum += p;
        }
        if sum > 1.0 + SUBSET_SUM_TOLERANCE {
            return Err(BackendError::Protocol(format!(
                "candidate probabilities sum to {sum}, more than a softmax subset allows"
            )));
        }
        Ok(())
    }
}
