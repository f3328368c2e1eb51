use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{
    BackendError, CacheKey, CachedProbability, MaskedLm, ModelTag, ProbabilityCache,
    ProbabilityRecord, ProbeQuery,
};

pub const DEFAULT_PARALLELISM: usize = 4;

/// Outcome of [`Prober::query_batch`], one entry per input probe in input
/// order.
#[derive(Debug)]
pub struct BatchReport {
    pub results: Vec<Result<ProbabilityRecord, BackendError>>,
}

impl BatchReport {
    pub fn records(&self) -> impl Iterator<Item = &ProbabilityRecord> {
        self.results.iter().filter_map(|r| r.as_ref().ok())
    }

    /// Failed probe indices with their reasons.
    pub fn failures(&self) -> Vec<(usize, &BackendError)> {
        self.results
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().err().map(|e| (i, e)))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.results.iter().all(Result::is_ok)
    }
}

/// Front end to a [`MaskedLm`]: validates probes and responses, consults the
/// cache, bounds in-flight requests and counts wire requests.
pub struct Prober {
    backend: Box<dyn MaskedLm>,
    cache: Option<ProbabilityCache>,
    parallelism: usize,
    wire_requests: AtomicUsize,
    model_ids: Mutex<BTreeMap<String, String>>,
}

impl Prober {
    pub fn new(backend: impl MaskedLm + 'static) -> Self {
        Self::from_boxed(Box::new(backend))
    }

    pub fn from_boxed(backend: Box<dyn MaskedLm>) -> Self {
        Self {
            backend,
            cache: None,
            parallelism: DEFAULT_PARALLELISM,
            wire_requests: AtomicUsize::new(0),
            model_ids: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_cache(mut self, cache: ProbabilityCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.backend_id()
    }

    pub fn no_image_mechanism(&self) -> String {
        self.backend.no_image_mechanism()
    }

    pub fn cache(&self) -> Option<&ProbabilityCache> {
        self.cache.as_ref()
    }

    /// Number of requests sent to the backend so far.
    pub fn wire_requests(&self) -> usize {
        self.wire_requests.load(Ordering::SeqCst)
    }

    /// Model ids observed so far, keyed by `text_only`, `vision_language`
    /// and `vision_language/no_image`.
    pub fn model_ids(&self) -> BTreeMap<String, String> {
        self.model_ids.lock().unwrap().clone()
    }

    fn cache_key(&self, probe: &ProbeQuery, candidate: &str) -> CacheKey {
        CacheKey {
            backend_id: self.backend.backend_id().to_owned(),
            model: probe.model,
            caption: probe.caption.clone(),
            image: probe.image_id().map(str::to_owned),
            candidate: candidate.to_owned(),
        }
    }

    fn note_model_id(&self, probe: &ProbeQuery, model_id: &str) {
        let slot = match (probe.model, probe.image.is_some()) {
            (ModelTag::TextOnly, _) => "text_only",
            (ModelTag::VisionLanguage, true) => "vision_language",
            (ModelTag::VisionLanguage, false) => "vision_language/no_image",
        };
        self.model_ids
            .lock()
            .unwrap()
            .entry(slot.to_owned())
            .or_insert_with(|| model_id.to_owned());
    }

    pub fn query(&self, probe: &ProbeQuery) -> Result<ProbabilityRecord, BackendError> {
        probe.validate()?;

        let mut probabilities = BTreeMap::new();
        let mut cached_meta: Option<(String, chrono::DateTime<chrono::Utc>)> = None;
        let mut missing = Vec::new();
        for candidate in &probe.candidates {
            let hit = self
                .cache
                .as_ref()
                .and_then(|c| c.get(&self.cache_key(probe, candidate)));
            match hit {
                Some(hit) => {
                    probabilities.insert(candidate.clone(), hit.probability);
                    cached_meta = match cached_meta {
                        Some((id, at)) if at >= hit.retrieved_at => Some((id, at)),
                        _ => Some((hit.model_id, hit.retrieved_at)),
                    };
                }
                None => missing.push(candidate.clone()),
            }
        }

        let (model_id, retrieved_at) = if missing.is_empty() {
            cached_meta.expect("non-empty candidate list")
        } else {
            self.wire_requests.fetch_add(1, Ordering::SeqCst);
            let fetched = self.backend.fetch(probe, &missing)?;
            let retrieved_at = self.backend.timestamp();
            let mut fresh = Vec::with_capacity(missing.len());
            for candidate in &missing {
                let p = *fetched.probabilities.get(candidate).ok_or_else(|| {
                    BackendError::Protocol(format!("response lacks candidate `{candidate}`"))
                })?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(BackendError::Protocol(format!(
                        "probability {p} for `{candidate}` outside [0, 1]"
                    )));
                }
                probabilities.insert(candidate.clone(), p);
                fresh.push((
                    self.cache_key(probe, candidate),
                    CachedProbability {
                        probability: p,
                        model_id: fetched.model_id.clone(),
                        retrieved_at,
                    },
                ));
            }
            if let Some(cache) = &self.cache {
                cache
                    .insert_all(fresh)
                    .map_err(|e| BackendError::Cache(e.to_string()))?;
            }
            (fetched.model_id, retrieved_at)
        };

        let record = ProbabilityRecord {
            query: probe.clone(),
            probabilities,
            backend_id: self.backend.backend_id().to_owned(),
            model_id,
            retrieved_at,
        };
        record.validate()?;
        self.note_model_id(probe, &record.model_id);
        Ok(record)
    }

    /// Queries every probe with at most `parallelism` requests in flight.
    /// Results come back in input order whatever the completion order.
    pub fn query_batch(&self, probes: &[ProbeQuery]) -> BatchReport {
        let workers = self.parallelism.min(probes.len());
        if workers <= 1 {
            return BatchReport {
                results: probes.iter().map(|p| self.query(p)).collect(),
            };
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<ProbabilityRecord, BackendError>>>> =
            probes.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(probe) = probes.get(i) else { break };
                    *slots[i].lock().unwrap() = Some(self.query(probe));
                });
            }
        });
        BatchReport {
            results: slots
                .into_iter()
                .map(|s| s.into_inner().unwrap().expect("every slot filled"))
                .collect(),
        }
    }
}
