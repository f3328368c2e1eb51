use std::collections::BTreeMap;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{BackendError, Fetched, MaskedLm, ModelTag, ProbeQuery};

pub const MASK_PROBS_PATH: &str = "/v1/mask_probs";

/// Request body for `POST /v1/mask_probs`. Field order is part of the wire
/// format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: ModelTag,
    pub caption: String,
    pub image: Option<String>,
    pub candidates: Vec<String>,
}

impl WireRequest {
    /// The image is sent as its `path_or_uri`, which the server resolves.
    pub fn from_probe(probe: &ProbeQuery, candidates: &[String]) -> Self {
        Self {
            model: probe.model,
            caption: probe.caption.clone(),
            image: probe.image.as_ref().map(|i| i.path_or_uri.clone()),
            candidates: candidates.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub probabilities: BTreeMap<String, f64>,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
}

/// Client for a model server speaking the `/v1/mask_probs` protocol. One
/// probe per request; no authentication.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: Client,
    endpoint: String,
    id: String,
}

impl HttpBackend {
    pub fn new(base_url: &str) -> Result<Self, BackendError> {
        Self::with_timeout(base_url, Duration::from_secs(120))
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Result<Self, BackendError> {
        let base = base_url.trim_end_matches('/');
        // Built without TLS: model servers are expected on a local network.
        if !base.starts_with("http://") {
            return Err(BackendError::Unreachable(format!(
                "`{base_url}` is not an http:// URL"
            )));
        }
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{base}{MASK_PROBS_PATH}"),
            id: format!("http:{base}"),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl MaskedLm for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn fetch(&self, probe: &ProbeQuery, candidates: &[String]) -> Result<Fetched, BackendError> {
        let body = serde_json::to_vec(&WireRequest::from_probe(probe, candidates))
            .expect("wire request serializes");
        let response = self
            .client
            .post(&self.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .map_err(|e| {
                if e.is_connect() || e.is_timeout() {
                    BackendError::Unreachable(e.to_string())
                } else {
                    BackendError::Protocol(e.to_string())
                }
            })?;
        let status = response.status();
        let bytes = response
            .bytes()
            .map_err(|e| BackendError::Protocol(format!("reading body: {e}")))?;
        match status {
            StatusCode::OK => {
                let parsed: WireResponse = serde_json::from_slice(&bytes)
                    .map_err(|e| BackendError::Protocol(format!("bad response body: {e}")))?;
                Ok(Fetched {
                    probabilities: parsed.probabilities,
                    model_id: parsed.model_id,
                })
            }
            StatusCode::UNPROCESSABLE_ENTITY => {
                let err: WireError = serde_json::from_slice(&bytes)
                    .map_err(|e| BackendError::Protocol(format!("bad 422 body: {e}")))?;
                match (err.error.as_str(), err.candidates) {
                    ("vocabulary_miss", Some(candidates)) if !candidates.is_empty() => {
                        Err(BackendError::VocabularyMiss { candidates })
                    }
                    (other, _) => Err(BackendError::Protocol(format!("422: {other}"))),
                }
            }
            StatusCode::BAD_REQUEST => Err(BackendError::MalformedCaption(
                String::from_utf8_lossy(&bytes).into_owned(),
            )),
            StatusCode::NOT_FOUND => Err(BackendError::ImageNotFound(
                probe
                    .image
                    .as_ref()
                    .map(|i| i.path_or_uri.clone())
                    .unwrap_or_default(),
            )),
            other => Err(BackendError::Protocol(format!("unexpected status {other}"))),
        }
    }

    fn no_image_mechanism(&self) -> String {
        "server-defined; see the vision_language/no_image model id".into()
    }
}
