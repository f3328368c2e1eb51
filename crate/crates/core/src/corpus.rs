//! Image manifests, stereotype surveys and label alignment.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{EntityImages, Gender, ImageManifest, ImageRef, Stereotype};
use crate::scoring::BiasScore;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("entity `{entity}` is unbalanced: {male} male vs {female} female images")]
    Balance {
        entity: String,
        male: usize,
        female: usize,
    },
    #[error("image `{id}` listed more than once (lines {first} and {second})")]
    DuplicateImage {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("incomplete survey: {} missing response(s), first: {}", .missing.len(), .missing.first().map(|(a, e)| format!("{a}/{e}")).unwrap_or_default())]
    IncompleteSurvey { missing: Vec<(String, String)> },
    #[error("annotator `{annotator}` labelled `{entity}` more than once")]
    DuplicateResponse { annotator: String, entity: String },
    #[error("survey is empty")]
    EmptySurvey,
    #[error("survey has {found} annotators, expected {expected}")]
    AnnotatorCount { expected: usize, found: usize },
    #[error("no bias score for labelled entity `{0}`")]
    MissingScore(String),
    #[error("no stereotype labels to align against")]
    NoLabels,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl ImageManifest {
    /// Groups images by entity and validates that every entity has as many
    /// male as female images and that no image id repeats.
    pub fn from_images(images: impl IntoIterator<Item = ImageRef>) -> Result<Self, CorpusError> {
        build_manifest(images.into_iter().enumerate().map(|(i, img)| (i + 1, img)))
    }
}

fn build_manifest(
    rows: impl Iterator<Item = (usize, ImageRef)>,
) -> Result<ImageManifest, CorpusError> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut entities: BTreeMap<String, EntityImages> = BTreeMap::new();
    for (line, img) in rows {
        if let Some(&first) = seen.get(&img.id) {
            return Err(CorpusError::DuplicateImage {
                id: img.id,
                first,
                second: line,
            });
        }
        seen.insert(img.id.clone(), line);
        let slot = entities.entry(img.entity.clone()).or_default();
        match img.agent_gender {
            Gender::Male => slot.male.push(img),
            Gender::Female => slot.female.push(img),
        }
    }
    for (entity, images) in &entities {
        if images.male.len() != images.female.len() {
            return Err(CorpusError::Balance {
                entity: entity.clone(),
                male: images.male.len(),
                female: images.female.len(),
            });
        }
    }
    Ok(ImageManifest::from_validated(entities))
}

/// Parses `entity<TAB>m|f<TAB>image_id<TAB>path_or_uri` rows.
pub fn parse_image_manifest(input: &str) -> Result<ImageManifest, CorpusError> {
    let mut rows = Vec::new();
    for (idx, raw) in input.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let [entity, gender, id, path] = fields.as_slice() else {
            return Err(CorpusError::Parse {
                line,
                reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        };
        let agent_gender = match *gender {
            "m" => Gender::Male,
            "f" => Gender::Female,
            other => {
                return Err(CorpusError::Parse {
                    line,
                    reason: format!("gender must be `m` or `f`, got `{other}`"),
                })
            }
        };
        if entity.is_empty() || id.is_empty() {
            return Err(CorpusError::Parse {
                line,
                reason: "entity and image id must be non-empty".into(),
            });
        }
        rows.push((
            line,
            ImageRef {
                id: id.to_string(),
                path_or_uri: path.to_string(),
                agent_gender,
                entity: entity.to_string(),
            },
        ));
    }
    build_manifest(rows.into_iter())
}

pub fn load_image_manifest(path: impl AsRef<Path>) -> Result<ImageManifest, CorpusError> {
    parse_image_manifest(&read(path.as_ref())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurveyLabel {
    Masculine,
    Feminine,
    NoAssociation,
}

impl SurveyLabel {
    fn stereotype(self) -> Option<Stereotype> {
        match self {
            SurveyLabel::Masculine => Some(Stereotype::Masculine),
            SurveyLabel::Feminine => Some(Stereotype::Feminine),
            SurveyLabel::NoAssociation => None,
        }
    }
}

impl FromStr for SurveyLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "masculine" => Ok(SurveyLabel::Masculine),
            "feminine" => Ok(SurveyLabel::Feminine),
            "no_association" => Ok(SurveyLabel::NoAssociation),
            other => Err(format!(
                "unknown label `{other}` (expected masculine, feminine or no_association)"
            )),
        }
    }
}

impl fmt::Display for SurveyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SurveyLabel::Masculine => "masculine",
            SurveyLabel::Feminine => "feminine",
            SurveyLabel::NoAssociation => "no_association",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub annotator_id: String,
    pub entity: String,
    pub label: SurveyLabel,
}

/// A stereotype label retained by strict majority.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereotypeLabel {
    pub entity: String,
    pub label: Stereotype,
    /// Fraction of all annotators choosing `label`; always above 0.5.
    pub agreement: f64,
}

/// Parses `annotator_id<TAB>entity<TAB>label` rows.
pub fn parse_survey(input: &str) -> Result<Vec<SurveyResponse>, CorpusError> {
    let mut out = Vec::new();
    for (idx, raw) in input.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let [annotator, entity, label] = fields.as_slice() else {
            return Err(CorpusError::Parse {
                line,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        let label = label
            .parse()
            .map_err(|reason| CorpusError::Parse { line, reason })?;
        out.push(SurveyResponse {
            annotator_id: annotator.to_string(),
            entity: entity.to_string(),
            label,
        });
    }
    Ok(out)
}

pub fn load_survey(path: impl AsRef<Path>) -> Result<Vec<SurveyResponse>, CorpusError> {
    parse_survey(&read(path.as_ref())?)
}

/// Keeps an entity with label `L` iff strictly more than half of all
/// `annotator_count` annotators chose `L`. `no_association` votes count
/// toward the denominator only. Output is sorted by entity name.
pub fn aggregate_survey(
    responses: &[SurveyResponse],
    annotator_count: usize,
) -> Result<Vec<StereotypeLabel>, CorpusError> {
    if responses.is_empty() || annotator_count == 0 {
        return Err(CorpusError::EmptySurvey);
    }
    let annotators: BTreeSet<&str> = responses.iter().map(|r| r.annotator_id.as_str()).collect();
    let entities: BTreeSet<&str> = responses.iter().map(|r| r.entity.as_str()).collect();

    let mut votes: HashMap<(&str, &str), SurveyLabel> = HashMap::new();
    for r in responses {
        if votes
            .insert((r.annotator_id.as_str(), r.entity.as_str()), r.label)
            .is_some()
        {
            return Err(CorpusError::DuplicateResponse {
                annotator: r.annotator_id.clone(),
                entity: r.entity.clone(),
            });
        }
    }
    let missing: Vec<(String, String)> = annotators
        .iter()
        .flat_map(|a| entities.iter().map(move |e| (*a, *e)))
        .filter(|key| !votes.contains_key(key))
        .map(|(a, e)| (a.to_owned(), e.to_owned()))
        .collect();
    if !missing.is_empty() {
        return Err(CorpusError::IncompleteSurvey { missing });
    }
    if annotators.len() != annotator_count {
        return Err(CorpusError::AnnotatorCount {
            expected: annotator_count,
            found: annotators.len(),
        });
    }

    let mut labels = Vec::new();
    for entity in entities {
        let mut masculine = 0usize;
        let mut feminine = 0usize;
        for a in &annotators {
            match votes[&(*a, entity)].stereotype() {
                Some(Stereotype::Masculine) => masculine += 1,
                Some(Stereotype::Feminine) => feminine += 1,
                None => {}
            }
        }
        let winner = [
            (Stereotype::Masculine, masculine),
            (Stereotype::Feminine, feminine),
        ]
        .into_iter()
        .find(|&(_, n)| 2 * n > annotator_count);
        if let Some((label, n)) = winner {
            labels.push(StereotypeLabel {
                entity: entity.to_owned(),
                label,
                agreement: n as f64 / annotator_count as f64,
            });
        }
    }
    Ok(labels)
}

/// Fraction of labelled entities whose bias direction matches the label:
/// feminine wants `B > 0`, masculine wants `B < 0`; `B = 0` never matches.
pub fn alignment_rate(
    bias_scores: &[BiasScore],
    labels: &[StereotypeLabel],
) -> Result<f64, CorpusError> {
    if labels.is_empty() {
        return Err(CorpusError::NoLabels);
    }
    let by_entity: HashMap<&str, f64> = bias_scores
        .iter()
        .map(|b| (b.entity.as_str(), b.value))
        .collect();
    let mut aligned = 0usize;
    for l in labels {
        let b = *by_entity
            .get(l.entity.as_str())
            .ok_or_else(|| CorpusError::MissingScore(l.entity.clone()))?;
        let ok = match l.label {
            Stereotype::Feminine => b > 0.0,
            Stereotype::Masculine => b < 0.0,
        };
        aligned += usize::from(ok);
    }
    Ok(aligned as f64 / labels.len() as f64)
}
